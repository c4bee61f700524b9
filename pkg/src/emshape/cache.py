"""
Caching layer for sparse factorizations.

State steps and adjoint steps frequently factor identical reduced matrices
(always for linear reluctivity); entries are keyed by a content hash of the
matrix so the adjoint sweep finds the factors the state sweep produced.
"""

import logging
from collections import OrderedDict
from typing import Any, Dict, Optional

import scipy.sparse as sp
from scipy.sparse.linalg import SuperLU, splu

from .shared_utils import SolverError, array_fingerprint

logger = logging.getLogger(__name__)


class FactorCache:
    """Bounded in-memory cache of sparse LU factors, least recently used out first."""

    def __init__(self, max_entries: int = 64):
        self._cache: "OrderedDict[str, SuperLU]" = OrderedDict()
        self.max_entries = max_entries
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key_for(matrix: sp.spmatrix) -> str:
        csc = sp.csc_matrix(matrix)
        csc.sort_indices()
        return array_fingerprint(csc.indptr, csc.indices, csc.data)

    def get(self, key: str) -> Optional[SuperLU]:
        factor = self._cache.get(key)
        if factor is None:
            return None
        self._cache.move_to_end(key)
        self.hits += 1
        logger.debug(f"Factor cache hit: {key}")
        return factor

    def set(self, key: str, factor: SuperLU) -> None:
        self._cache[key] = factor
        self._cache.move_to_end(key)
        while len(self._cache) > self.max_entries:
            evicted, _ = self._cache.popitem(last=False)
            logger.debug(f"Factor cache evict: {evicted}")

    def factor(self, matrix: sp.spmatrix) -> SuperLU:
        """Factor of `matrix`, computed on first request."""
        key = self.key_for(matrix)
        cached = self.get(key)
        if cached is not None:
            return cached
        self.misses += 1
        try:
            factor = splu(sp.csc_matrix(matrix))
        except RuntimeError as e:
            raise SolverError(f"sparse factorization failed: {e}") from e
        self.set(key, factor)
        return factor

    def clear(self) -> None:
        self._cache.clear()
        self.hits = 0
        self.misses = 0
        logger.debug("Factor cache cleared")

    def get_stats(self) -> Dict[str, Any]:
        return {
            "total_entries": len(self._cache),
            "max_entries": self.max_entries,
            "hits": self.hits,
            "misses": self.misses,
        }


# Global factor cache instance
_factor_cache: Optional[FactorCache] = None


def get_factor_cache() -> FactorCache:
    """Get the global factor cache instance."""
    global _factor_cache
    if _factor_cache is None:
        from .run_config import get_settings

        _factor_cache = FactorCache(get_settings()["solver"]["factor_cache_entries"])
    return _factor_cache

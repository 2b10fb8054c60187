from abc import ABC, abstractmethod

import numpy as np
from joblib import delayed, Parallel

from layer_rsa.types import Measure
from layer_rsa.utils import row_blocks


class BaseMeasure(ABC):
    """
    Base class for dissimilarity measures between activity patterns.
    """

    measure: Measure

    @abstractmethod
    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        """
        Dissimilarity between two activity patterns.
        """

    @abstractmethod
    def block(self, data: np.ndarray, rows: slice) -> np.ndarray:
        """
        Dissimilarities of data[rows] to data[rows.start:].

        Args:
            data: N x H matrix of activity patterns
            rows: Contiguous block of row indices

        Returns:
            Array of shape (len(rows), N - rows.start)
        """

    def prepare(self, data: np.ndarray) -> np.ndarray:
        """
        Transform the patterns once before blocks are computed.
        """
        return data

    def matrix(self, data: np.ndarray, threads: int = 1) -> np.ndarray:
        """
        Full dissimilarity matrix; the upper triangle is computed once and mirrored.

        Blocks have a fixed size, so the result does not depend on the number
        of threads.

        Args:
            data: N x H matrix of activity patterns
            threads: Number of worker threads

        Returns:
            N x N symmetric matrix with an exact-zero diagonal
        """
        prepared = self.prepare(np.asarray(data, dtype=np.float64))
        n = prepared.shape[0]
        blocks = row_blocks(n)

        results = Parallel(n_jobs=threads, prefer="threads")(
            delayed(self.block)(prepared, rows) for rows in blocks
        )

        full = np.zeros((n, n), dtype=np.float64)
        for rows, result in zip(blocks, results):
            full[rows, rows.start :] = result

        upper = np.triu(full, k=1)
        return upper + upper.T

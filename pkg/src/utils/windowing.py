"""
Sequence Windowing Utility

Cuts long sequences (chromosomes, corpus records) into fixed-length windows
for batching. Partial trailing windows are dropped so every batch stays
rectangular.
"""

from typing import Any, Dict, Iterable, List, Sequence, TypeVar

from src.errors import PreconditionError

T = TypeVar("T", bound=Sequence)


class SequenceWindower:
    """Fixed-length windowing with tiled or sliding strides."""

    def __init__(self):
        """Initialize the windower."""
        self.strategies = {
            'tiled': self._stride_tiled,
            'sliding': self._stride_sliding,
        }

    def window(self, seq: T, length: int, stride: int) -> List[T]:
        """
        Cut one sequence into full windows.

        Args:
            seq: Sliceable sequence
            length: Window length >= 1
            stride: Step between window starts >= 1

        Returns:
            Windows starting at 0, stride, 2*stride, ... that fit entirely
        """
        self._check(length, stride)
        return [seq[start:start + length] for start in self.window_starts(len(seq), length, stride)]

    def window_starts(self, total: int, length: int, stride: int) -> range:
        self._check(length, stride)
        if total < length:
            return range(0)
        return range(0, total - length + 1, stride)

    def count_windows(self, total: int, length: int, stride: int) -> int:
        """floor((total - length) / stride) + 1 when total >= length, else 0."""
        self._check(length, stride)
        return (total - length) // stride + 1 if total >= length else 0

    def window_all(self, sequences: Iterable[T], length: int, strategy: str = 'tiled',
                   stride: int = 0) -> List[T]:
        """
        Window every sequence of a corpus, preserving record order.

        Args:
            sequences: Corpus sequences
            length: Window length
            strategy: 'tiled' (stride = length) or 'sliding' (explicit stride)
            stride: Stride for the 'sliding' strategy

        Returns:
            All windows in record order
        """
        if strategy not in self.strategies:
            raise PreconditionError(f"Unknown windowing strategy: {strategy}")
        step = self.strategies[strategy](length, stride)
        windows: List[T] = []
        for seq in sequences:
            windows.extend(self.window(seq, length, step))
        return windows

    def get_window_info(self, total: int, length: int, stride: int) -> Dict[str, Any]:
        """
        Describe how a sequence of a given size is windowed.

        Returns:
            Dictionary with the window count and the dropped tail size
        """
        count = self.count_windows(total, length, stride)
        covered = (count - 1) * stride + length if count else 0
        return {
            'windows': count,
            'length': length,
            'stride': stride,
            'dropped_tail': total - covered if count else total,
        }

    def _stride_tiled(self, length: int, stride: int) -> int:
        return length

    def _stride_sliding(self, length: int, stride: int) -> int:
        if stride < 1:
            raise PreconditionError(f"Sliding windows need a stride >= 1, got {stride}")
        return stride

    @staticmethod
    def _check(length: int, stride: int) -> None:
        if length < 1 or stride < 1:
            raise PreconditionError(f"Window length and stride must be >= 1, got {length}, {stride}")


"""Ordered, named parameter tables shared by both networks."""

from __future__ import annotations

import numpy as np

from .ndgrad import ParameterError, Tensor


class ParamStore:
    """Insertion-ordered table of named tensors.

    Trainable entries (weights, biases, norm scale/shift) carry
    requires_grad; buffer entries (batchnorm running statistics) do not and
    are skipped by the optimizer, but still travel through checkpoints.
    """

    def __init__(self):
        self._tensors = {}
        self._trainable = set()

    def add(self, name, array, trainable=True):
        if name in self._tensors:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array), requires_grad=trainable)
        self._tensors[name] = t
        if trainable:
            self._trainable.add(name)
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name):
        return name in self._trainable

    def trainable_items(self):
        return [(n, t) for n, t in self._tensors.items() if n in self._trainable]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def element_count(self):
        return sum(t.size for t in self._tensors.values())

    def clone_data(self):
        """Snapshot of every entry's raw array, for isolation checks."""
        return {n: t.data.copy() for n, t in self._tensors.items()}

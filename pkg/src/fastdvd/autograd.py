"""Tape-based reverse-mode differentiation over the tensor kernels.

A :class:`Graph` records kernel applications in execution order, which is a
topological order by construction, and :meth:`Graph.backward` walks it in
reverse exactly once. :class:`Eager` exposes the same methods without
recording anything, so model code is written once and runs either way.
"""

import numpy as np

from . import kernels as K
from .errors import ShapeError


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, name=None,
                 requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.shape}>"


class Graph:
    """Records one forward pass for differentiation.

    Leaf parameters are registered by name through :meth:`param`; asking for
    the same name twice returns the same node, so weights shared between
    several applications accumulate a single gradient.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}

    def _record(self, value, parents, backward_fn):
        needs = any(p.requires_grad for p in parents)
        node = Node(value, parents, backward_fn if needs else None,
                    requires_grad=needs)
        self.nodes.append(node)
        return node

    def param(self, name, array):
        node = self.params.get(name)
        if node is None:
            node = Node(array, name=name, requires_grad=True)
            self.params[name] = node
            self.nodes.append(node)
        return node

    def constant(self, array):
        node = Node(array)
        self.nodes.append(node)
        return node

    def _lift(self, x):
        return x if isinstance(x, Node) else self.constant(x)

    # kernels

    def conv2d(self, x, weight, bias, stride=1, groups=1):
        x, weight, bias = self._lift(x), self._lift(weight), self._lift(bias)
        y, cache = K.conv2d_forward(x.value, weight.value, bias.value, stride,
                                    groups, save=True)

        def backward(dy):
            return K.conv2d_backward(dy, cache, weight.value,
                                     need_dx=x.requires_grad)

        return self._record(y, (x, weight, bias), backward)

    def batch_norm(self, x, gamma, beta, running_mean, running_var, training):
        x, gamma, beta = self._lift(x), self._lift(gamma), self._lift(beta)
        y, cache = K.batch_norm_forward(x.value, gamma.value, beta.value,
                                        running_mean, running_var, training)

        def backward(dy):
            return K.batch_norm_backward(dy, cache, gamma.value)

        return self._record(y, (x, gamma, beta), backward)

    def relu(self, x):
        x = self._lift(x)
        mask = x.value > 0
        return self._record(K.relu(x.value), (x,), lambda dy: (dy * mask,))

    def pixel_shuffle(self, x):
        x = self._lift(x)
        return self._record(K.pixel_shuffle(x.value), (x,),
                            lambda dy: (K.pixel_unshuffle(dy),))

    def add(self, x, y):
        x, y = self._lift(x), self._lift(y)
        return self._record(K.add(x.value, y.value), (x, y), lambda dy: (dy, dy))

    def sub(self, x, y):
        x, y = self._lift(x), self._lift(y)
        if x.shape != y.shape:
            raise ShapeError(f"sub: shape mismatch {x.shape} vs {y.shape}")
        return self._record(x.value - y.value, (x, y), lambda dy: (dy, -dy))

    def concat_channels(self, parts):
        parts = [self._lift(p) for p in parts]
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward(dy):
            return tuple(dy[:, a:b] for a, b in zip(bounds[:-1], bounds[1:]))

        return self._record(K.concat_channels([p.value for p in parts]),
                            tuple(parts), backward)

    def mse_loss(self, estimate, target):
        estimate, target = self._lift(estimate), self._lift(target)
        if estimate.shape != target.shape:
            raise ShapeError(f"mse_loss: shape mismatch {estimate.shape} vs {target.shape}",
                             expected=target.shape, actual=estimate.shape)
        diff = estimate.value - target.value
        value = np.asarray(0.5 * np.mean(diff * diff), dtype=diff.dtype)

        def backward(dy):
            g = diff * (dy / diff.size)
            return g, -g

        return self._record(value, (estimate, target), backward)

    def weighted_sum(self, x, weights):
        """``sum(x * weights)``, a scalar probe used by gradient checks."""
        x = self._lift(x)
        value = np.asarray(np.sum(x.value * weights), dtype=x.value.dtype)
        return self._record(value, (x,), lambda dy: (dy * weights,))

    def sum(self, x):
        return self.weighted_sum(x, np.ones_like(self._lift(x).value))

    def backward(self, loss):
        """Propagate d(loss) back to every named parameter.

        Returns ``{name: gradient}``. The tape is cleared afterwards.
        """
        if np.size(loss.value) != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}",
                             expected=(), actual=loss.shape)
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            node.grad = None
        out = {name: (node.grad if node.grad is not None else np.zeros_like(node.value))
               for name, node in self.params.items()}
        self.nodes.clear()
        self.params.clear()
        return out


class Eager:
    """Same surface as :class:`Graph`, evaluating kernels directly."""

    def param(self, name, array):
        return array

    def constant(self, array):
        return array

    def conv2d(self, x, weight, bias, stride=1, groups=1):
        return K.conv2d_forward(x, weight, bias, stride, groups)[0]

    def batch_norm(self, x, gamma, beta, running_mean, running_var, training):
        return K.batch_norm_forward(x, gamma, beta, running_mean, running_var,
                                    training)[0]

    def relu(self, x):
        return K.relu(x)

    def pixel_shuffle(self, x):
        return K.pixel_shuffle(x)

    def add(self, x, y):
        return K.add(x, y)

    def sub(self, x, y):
        if x.shape != y.shape:
            raise ShapeError(f"sub: shape mismatch {x.shape} vs {y.shape}")
        return x - y

    def concat_channels(self, parts):
        return K.concat_channels(list(parts))

    def mse_loss(self, estimate, target):
        return mse_loss(estimate, target)


def mse_loss(estimate, target):
    """Half the per-element mean squared error, averaged over the batch."""
    if estimate.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {estimate.shape} vs {target.shape}",
                         expected=target.shape, actual=estimate.shape)
    diff = estimate - target
    return float(0.5 * np.mean(diff * diff))

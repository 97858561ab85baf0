"""
Small reverse-mode differentiation core on numpy float64 arrays.

Each operation records its parents and a backward function that maps the
output gradient to one gradient per parent; ``Tensor.backward`` walks the
recorded graph in reverse topological order and accumulates into ``grad``.
"""

import json
import logging
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from errors import ShapeError, TrainingDivergenceError, UndefinedSimilarityError

logger = logging.getLogger(__name__)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        return float(self.values)

    def numpy(self):
        return self.values.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Graph bookkeeping

    @staticmethod
    def _result(values, parents, backward):
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return Tensor(values, True, parents, backward)
        return Tensor(values)

    def backward(self, grad=None):
        if not self.requires_grad:
            return
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.values) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(g, parent.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    # Arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        return Tensor._result(self.values + other.values, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return Tensor._result(self.values - other.values, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._result(-self.values, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.values, other.values
        return Tensor._result(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.values, other.values
        return Tensor._result(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.values, other.values
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
        return Tensor._result(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def square(self):
        a = self.values
        return Tensor._result(a * a, (self,), lambda g: (2.0 * a * g,))

    @property
    def T(self):
        return Tensor._result(self.values.T, (self,), lambda g: (g.T,))

    def reshape(self, *shape):
        original = self.shape
        return Tensor._result(self.values.reshape(*shape), (self,), lambda g: (g.reshape(original),))

    # Reductions

    def sum(self, axis=None, keepdims=False):
        original = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, original).copy(),)

        return Tensor._result(self.values.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.values.size if axis is None else self.values.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # Elementwise

    def relu(self):
        mask = self.values > 0
        return Tensor._result(self.values * mask, (self,), lambda g: (g * mask,))

    def exp(self):
        out = np.exp(self.values)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.values
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,))

    def clip(self, low, high):
        a = self.values
        mask = (a >= low) & (a <= high)
        return Tensor._result(np.clip(a, low, high), (self,), lambda g: (g * mask,))

    # Indexing

    def take(self, indices, axis=0):
        indices = np.asarray(indices, dtype=np.int64)
        original = self.shape

        def backward(g):
            grad = np.zeros(original)
            moved = np.moveaxis(grad, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
            return (grad,)

        return Tensor._result(np.take(self.values, indices, axis=axis), (self,), backward)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(values):
    return Tensor(values, requires_grad=True)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    values = [t.values for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as e:
        raise ShapeError(f"Cannot concatenate shapes {[v.shape for v in values]}: {e}") from e
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tensors, backward)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.values <= b.values
    out = np.where(take_a, a.values, b.values)
    return Tensor._result(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def linear(x, w, b=None):
    """Row-wise affine map ``x @ w + b``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x @ w
    if b is not None:
        b = as_tensor(b)
        if b.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b
    return out


def softmax_rows(s):
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    s = as_tensor(s)
    if s.values.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {s.shape}")
    shifted = s.values - s.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._result(out, (s,), backward)


def normalize_rows(p, eps=0.0):
    """Divide each row by its sum."""
    p = as_tensor(p)
    return p / (p.sum(axis=1, keepdims=True) + eps)


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("Cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# Layers

class Module:
    """Container of named parameters and child modules."""

    def named_parameters(self, prefix=''):
        params = OrderedDict()
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[full] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(full + '.'))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{full}.{i}."))
            elif isinstance(value, dict):
                for key in sorted(value):
                    if isinstance(value[key], Module):
                        params.update(value[key].named_parameters(f"{full}.{key}."))
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self):
        return sum(p.values.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = parameter(rng.uniform(-bound, bound, size=(out_dim,)))

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class MlpBlock(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths, rng, activation='relu'):
        if len(widths) < 2:
            raise ShapeError(f"An MLP needs at least two widths, got {widths}")
        if activation != 'relu':
            raise ValueError(f"Unsupported nonlinearity '{activation}'")
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.layers = [Linear(a, b, rng) for a, b in zip(self.widths, self.widths[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class AttentionBlock(Module):
    """
    Scaled dot-product attention with a residual connection.

    Output has the query source's shape; with several heads the per-head
    outputs are averaged.
    """

    def __init__(self, query_dim, key_dim, model_dim, rng, n_heads=1):
        self.model_dim = model_dim
        self.heads = []
        for _ in range(n_heads):
            head = Module()
            head.w_q = parameter(rng.uniform(-1, 1, (query_dim, model_dim)) / math.sqrt(query_dim))
            head.w_k = parameter(rng.uniform(-1, 1, (key_dim, model_dim)) / math.sqrt(key_dim))
            head.w_v = parameter(rng.uniform(-1, 1, (key_dim, query_dim)) / math.sqrt(key_dim))
            self.heads.append(head)

    def __call__(self, query_src, key_val_src, return_weights=False):
        return attention(query_src, key_val_src, self, return_weights)


def attention(query_src, key_val_src, params, return_weights=False):
    """``query_src + softmax(Q K^T / sqrt(d)) V``; self-attention when both sources are the same."""
    query_src, key_val_src = as_tensor(query_src), as_tensor(key_val_src)
    head0 = params.heads[0]
    if query_src.shape[1] != head0.w_q.shape[0] or key_val_src.shape[1] != head0.w_k.shape[0]:
        raise ShapeError(
            f"attention: sources {query_src.shape}/{key_val_src.shape} do not match parameters"
        )
    scale = 1.0 / math.sqrt(params.model_dim)
    outputs, weights = [], []
    for head in params.heads:
        q = query_src @ head.w_q
        k = key_val_src @ head.w_k
        v = key_val_src @ head.w_v
        w = softmax_rows((q @ k.T) * scale)
        outputs.append(w @ v)
        weights.append(w)
    mixed = outputs[0]
    for extra in outputs[1:]:
        mixed = mixed + extra
    if len(outputs) > 1:
        mixed = mixed * (1.0 / len(outputs))
    out = query_src + mixed
    return (out, weights) if return_weights else out


# Optimisation

class Adam:
    def __init__(self, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named_params):
        """Apply one Adam update to every parameter holding a gradient."""
        grads = {name: p.grad for name, p in named_params.items() if p.grad is not None}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"Non-finite gradient for parameter '{name}'")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = named_params[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.values = p.values - self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        return named_params

    def state_dict(self):
        return {'t': self.t, 'm': dict(self.m), 'v': dict(self.v)}


def optimizer_step(named_params, grads, optimizer):
    """Assign ``grads`` to the parameters and apply one step of ``optimizer``."""
    for name, g in grads.items():
        p = named_params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        p.grad = g
    return optimizer.step(named_params)


def grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    return math.sqrt(total)


def clip_grad_norm(params, max_norm):
    norm = grad_norm(params)
    if not math.isfinite(norm):
        raise TrainingDivergenceError("Gradient norm is not finite")
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# Checkpoints

def save_checkpoint(module, path, metadata=None):
    """Write named parameter arrays and a JSON metadata record to an ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.values for name, p in module.named_parameters().items()}
    arrays['__meta__'] = np.array(json.dumps(metadata or {}, sort_keys=True))
    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    logger.info(f"Checkpoint written: {path} ({len(arrays) - 1} tensors)")
    return path


def load_checkpoint(module, path):
    """Load parameters saved by ``save_checkpoint`` into ``module``; return the metadata."""
    params = module.named_parameters()
    with np.load(path, allow_pickle=False) as data:
        names = [n for n in data.files if n != '__meta__']
        missing = set(params) - set(names)
        unexpected = set(names) - set(params)
        if missing or unexpected:
            raise ShapeError(f"Checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name in names:
            values = data[name]
            if values.shape != params[name].shape:
                raise ShapeError(f"Checkpoint tensor '{name}' has shape {values.shape}, "
                                 f"expected {params[name].shape}")
            params[name].values = values.astype(np.float64)
        meta = json.loads(str(data['__meta__'])) if '__meta__' in data.files else {}
    return meta


def read_checkpoint_metadata(path):
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data['__meta__'])) if '__meta__' in data.files else {}


# Verification

def gradient_check(loss_fn, params, eps=1e-6):
    """Relative error between backprop and central differences for a scalar ``loss_fn()``."""
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.values)).ravel() for p in params
    ])
    numeric = []
    for p in params:
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn().item()
            flat[i] = original - eps
            minus = loss_fn().item()
            flat[i] = original
            numeric.append((plus - minus) / (2.0 * eps))
    numeric = np.asarray(numeric)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)

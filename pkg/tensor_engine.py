# tensor_engine.py
"""Moteur de tenseurs denses float64 avec différentiation en mode inverse.

Chaque opération calcule sa valeur avec numpy et, si un de ses parents exige
un gradient, enregistre une fermeture ``_backward`` qui renvoie le gradient de
chaque parent. Le graphe est construit à chaque passe avant et libéré par
``backward``.

Conventions d'axes : l'avant-dernier axe est le temps (lignes), le dernier les
caractéristiques ; les axes de tête sont des dimensions de lot.
"""
import logging
from contextlib import contextmanager

import numpy as np

from utils import LabError, NonFiniteError, ShapeError, make_rng

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Désactive la construction du graphe (évaluation, différences finies)"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# ==================== TENSEUR ====================
class Tensor:
    """Valeur dense immuable ; seul l'emplacement ``grad`` est modifiable."""

    def __init__(self, data, requires_grad=False, _op="constante", _copy=True):
        array = np.array(data, dtype=np.float64) if _copy else np.asarray(data, dtype=np.float64)
        if not np.isfinite(array).all():
            raise NonFiniteError(f"valeur non finie produite par l'opération '{_op}'")
        array.flags.writeable = False
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return np.array(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents, op, backward_fn):
    out = Tensor(data, _op=op, _copy=False)
    if _GRAD_ENABLED and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Somme le gradient sur les axes diffusés pour retrouver ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op} : formes incompatibles {a.shape} et {b.shape}") from exc


# ==================== RÉTROPROPAGATION ====================
def backward(loss):
    """Remplit ``grad`` de chaque feuille exigeant un gradient avec d(loss)/d(feuille)"""
    if loss.data.size != 1:
        raise ShapeError(f"backward exige une perte scalaire, forme reçue {loss.shape}")

    order = []
    visited = set()
    stack = [(loss, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
        # graphe libéré
        node._parents = ()
        node._backward = None


# ==================== OPÉRATIONS ÉLÉMENTAIRES ====================
def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", _backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", _backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", _backward)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), "scale", lambda g: (g * c,))


def square(x):
    x = _as_tensor(x)
    return _node(x.data * x.data, (x,), "square", lambda g: (2.0 * g * x.data,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul exige des matrices, formes {a.shape} et {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul : dimensions internes {a.shape[-1]} et {b.shape[-2]} différentes")

    def _backward(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return _node(a.data @ b.data, (a, b), "matmul", _backward)


def transpose(x):
    """Échange les deux derniers axes"""
    x = _as_tensor(x)
    return _node(np.swapaxes(x.data, -1, -2), (x,), "transpose", lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape : {x.shape} vers {shape} impossible") from exc
    return _node(data, (x,), "reshape", lambda g: (g.reshape(x.shape),))


# ==================== ACTIVATIONS ====================
def relu(x):
    x = _as_tensor(x)
    active = x.data > 0
    return _node(np.where(active, x.data, 0.0), (x,), "relu", lambda g: (g * active,))


def elu(x):
    """ELU avec alpha = 1"""
    x = _as_tensor(x)
    positive = x.data > 0
    negative_part = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(positive, x.data, negative_part)
    return _node(out, (x,), "elu", lambda g: (g * np.where(positive, 1.0, negative_part + 1.0),))


def sigmoid(x):
    x = _as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


# ==================== RÉDUCTIONS ====================
def sum_all(x):
    x = _as_tensor(x)
    return _node(np.sum(x.data), (x,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1) if x.data.size else 1

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _node(out, (x,), "mean", _backward)


def softmax_rows(x, mask=None):
    """Softmax sur le dernier axe ; ``mask`` vrai = logit interdit (mis à -inf)"""
    x = _as_tensor(x)
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if mask.all(axis=-1).any():
            raise ShapeError("softmax_rows : une ligne est entièrement masquée")
        logits = np.where(mask, -np.inf, logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    out = weights / weights.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _node(out, (x,), "softmax", _backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalisation sur le dernier axe, puis gamma * x_hat + beta"""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm : gamma/beta {gamma.shape} incompatibles avec {x.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    width = x.shape[-1]

    def _backward(g):
        g_hat = g * gamma.data
        grad_x = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        grad_gamma = (g * x_hat).reshape(-1, width).sum(axis=0)
        grad_beta = g.reshape(-1, width).sum(axis=0)
        return grad_x, grad_gamma, grad_beta

    return _node(x_hat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", _backward)


# ==================== STRUCTURE ====================
def concat(*tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat sans tenseur")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat : formes incompatibles {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(data, tuple(tensors), "concat", _backward)


def slice_rows(x, start, stop):
    x = _as_tensor(x)
    data = x.data[..., start:stop, :]

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[..., start:stop, :] = g
        return (grad,)

    return _node(data, (x,), "slice_rows", _backward)


def gather_rows(x, indices):
    """Sélectionne des lignes ; ``indices`` de forme (..., U) sans doublon"""
    x = _as_tensor(x)
    index = np.asarray(indices)[..., None]
    data = np.take_along_axis(x.data, index, axis=-2)

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, index, g, axis=-2)
        return (grad,)

    return _node(data, (x,), "gather_rows", _backward)


def scatter_rows(base, indices, rows):
    """Copie de ``base`` dont les lignes ``indices`` sont remplacées par ``rows``"""
    base, rows = _as_tensor(base), _as_tensor(rows)
    index = np.asarray(indices)[..., None]
    data = np.array(base.data)
    np.put_along_axis(data, index, rows.data, axis=-2)

    def _backward(g):
        grad_base = np.array(g)
        np.put_along_axis(grad_base, index, 0.0, axis=-2)
        return grad_base, np.take_along_axis(g, index, axis=-2)

    return _node(data, (base, rows), "scatter_rows", _backward)


def cumulative_mean_rows(x):
    """Ligne i = moyenne des lignes 0..i"""
    x = _as_tensor(x)
    counts = np.arange(1, x.shape[-2] + 1, dtype=np.float64)[:, None]
    data = np.cumsum(x.data, axis=-2) / counts

    def _backward(g):
        scaled = g / counts
        return (np.flip(np.cumsum(np.flip(scaled, axis=-2), axis=-2), axis=-2),)

    return _node(data, (x,), "cummean", _backward)


def max_pool_1d(x, stride=2):
    """Max par caractéristique sur des fenêtres disjointes de ``stride`` pas de temps"""
    x = _as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"max_pool_1d exige au moins un pas de temps, forme {x.shape}")
    length, width = x.shape[-2], x.shape[-1]
    n_out = -(-length // stride)
    pad = n_out * stride - length
    padded = x.data
    if pad:
        filler = np.full(x.shape[:-2] + (pad, width), -np.inf)
        padded = np.concatenate([x.data, filler], axis=-2)
    windows = padded.reshape(x.shape[:-2] + (n_out, stride, width))
    argmax = windows.argmax(axis=-2)[..., None, :]
    data = np.take_along_axis(windows, argmax, axis=-2)[..., 0, :]

    def _backward(g):
        grad = np.zeros(windows.shape)
        np.put_along_axis(grad, argmax, g[..., None, :], axis=-2)
        return (grad.reshape(padded.shape)[..., :length, :],)

    return _node(data, (x,), "max_pool_1d", _backward)


def dropout(x, rate, seed=0, training=False):
    """Dropout inversé ; identité stricte hors entraînement"""
    if not 0.0 <= rate < 1.0:
        raise LabError(f"taux de dropout invalide : {rate} (attendu dans [0, 1[)")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = make_rng(seed).random(x.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    mask = keep * factor
    return _node(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


# ==================== VÉRIFICATION DES GRADIENTS ====================
def grad_check(function, point, eps=1e-5, max_coordinates=None, seed=0):
    """Compare le gradient analytique aux différences centrées.

    ``point`` est un tableau ou une liste de tableaux (un par argument de
    ``function``). Renvoie max |analytique - numérique| / max(1, |analytique|).
    """
    several = isinstance(point, (list, tuple))
    points = [np.array(p, dtype=np.float64) for p in (point if several else [point])]

    leaves = [Tensor(p, requires_grad=True) for p in points]
    for leaf in leaves:
        leaf.zero_grad()
    backward(function(*leaves))
    analytic = [leaf.grad for leaf in leaves]

    coordinates = [(i, index) for i, p in enumerate(points) for index in np.ndindex(p.shape)]
    if max_coordinates is not None and len(coordinates) > max_coordinates:
        chosen = make_rng(seed).choice(len(coordinates), size=max_coordinates, replace=False)
        coordinates = [coordinates[k] for k in sorted(chosen)]

    def _evaluate(shifted):
        with no_grad():
            return function(*[Tensor(p) for p in shifted]).item()

    worst = 0.0
    for i, index in coordinates:
        plus = [p.copy() for p in points]
        minus = [p.copy() for p in points]
        plus[i][index] += eps
        minus[i][index] -= eps
        numeric = (_evaluate(plus) - _evaluate(minus)) / (2.0 * eps)
        value = analytic[i][index]
        worst = max(worst, abs(value - numeric) / max(1.0, abs(value)))
    logger.debug("grad_check : %d coordonnées, erreur max %.3e", len(coordinates), worst)
    return worst

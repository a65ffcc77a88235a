"""
Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` records the operation that produced it; `backward()` walks the
recorded graph in reverse topological order and accumulates gradients into
the leaves that require them. Only scalar outputs can be differentiated.
"""
import math
import logging
import numpy as np
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self,
                 data: ArrayLike,
                 requires_grad: bool = False,
                 name: Optional[str] = None,
                 _parents: Tuple['Tensor', ...] = (),
                 _backward: Optional[Callable] = None
                 ) -> None:
        self.data          = np.asarray(data, dtype=np.float64)
        self.grad          = None  # type: Optional[np.ndarray]
        self.name          = name
        self.requires_grad = requires_grad
        self._parents      = _parents
        self._backward     = _backward

    # --------------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> 'Tensor':
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f' {self.name}' if self.name else ''
        return f'<Tensor{label} shape={self.shape} grad={self.requires_grad}>'

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------------------
    # arithmetic
    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> 'Tensor':
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> 'Tensor':
        return div(other, self)

    def __neg__(self) -> 'Tensor':
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> 'Tensor':
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> 'Tensor':
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> 'Tensor':
        return matmul(other, self)

    def __getitem__(self, index) -> 'Tensor':
        return getitem(self, index)

    # --------------------------------------------------------------------------
    # method forms of the free functions
    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        return transpose(self, axes if axes else None)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def sqrt(self) -> 'Tensor':
        return sqrt(self)

    def relu(self) -> 'Tensor':
        return relu(self)

    def sigmoid(self) -> 'Tensor':
        return sigmoid(self)

    def norm(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return norm(self, axis, keepdims)

    # --------------------------------------------------------------------------
    def backward(self) -> None:
        """ Accumulate d(self)/d(leaf) into every reachable leaf that requires it """
        if self.data.size != 1:
            raise ValueError(f'backward() needs a scalar output, got shape {self.shape}')
        if not self.requires_grad:
            return

        order   = _topological_order(self)
        grads   = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, pgrad in zip(node._parents, node._backward(grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pgrad if key not in grads else grads[key] + pgrad


class Parameter(Tensor):
    """ A leaf tensor the optimizers update in place """
    def __init__(self, data: ArrayLike, name: Optional[str] = None) -> None:
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# ------------------------------------------------------------------------------
# elementwise binary operations (numpy broadcasting)
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out  = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return _result(out, (a, b), backward)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """ Elementwise minimum; ties route the gradient to `a` """
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data <= b.data

    def backward(g):
        return _unbroadcast(np.where(pick, g, 0.0), a.shape), _unbroadcast(np.where(pick, 0.0, g), b.shape)
    return _result(np.where(pick, a.data, b.data), (a, b), backward)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data >= b.data

    def backward(g):
        return _unbroadcast(np.where(pick, g, 0.0), a.shape), _unbroadcast(np.where(pick, 0.0, g), b.shape)
    return _result(np.where(pick, a.data, b.data), (a, b), backward)


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)
    return _result(np.where(cond, a.data, b.data), (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f'matmul needs operands with at least 2 dims: {a.shape} @ {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f'Shape mismatch in matmul: {a.shape} @ {b.shape}')

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(np.matmul(a.data, b.data), (a, b), backward)


# ------------------------------------------------------------------------------
# elementwise unary operations
def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)
    return _result(a.data ** exponent, (a,), backward)


def exp(a: ArrayLike) -> Tensor:
    a   = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)
    return _result(out, (a,), backward)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)
    return _result(np.log(a.data), (a,), backward)


def sqrt(a: ArrayLike) -> Tensor:
    a   = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)
    return _result(out, (a,), backward)


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * np.cos(a.data),)
    return _result(np.sin(a.data), (a,), backward)


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g * np.sin(a.data),)
    return _result(np.cos(a.data), (a,), backward)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * (a.data > 0),)
    return _result(np.maximum(a.data, 0.0), (a,), backward)


def sigmoid(a: ArrayLike) -> Tensor:
    a   = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return (g * out * (1.0 - out),)
    return _result(out, (a,), backward)


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),)
    return _result(np.logaddexp(0.0, a.data), (a,), backward)


def tanh(a: ArrayLike) -> Tensor:
    a   = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)
    return _result(out, (a,), backward)


def identity(a: ArrayLike) -> Tensor:
    return as_tensor(a)


# ------------------------------------------------------------------------------
# reductions
def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a     = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def norm(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """ Euclidean norm; the gradient at the origin is taken as zero """
    a   = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * a.ndim)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * a.data / safe, 0.0),)
    value = out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.reshape(()))
    return _result(value, (a,), backward)


def cumsum(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)
    return _result(np.cumsum(a.data, axis=axis), (a,), backward)


# ------------------------------------------------------------------------------
# shape manipulation and indexing
def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)
    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: ArrayLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    """ Reverse the last two axes, or permute by `axes` """
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(a.data, axes), (a,), backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: ArrayLike, index) -> Tensor:
    a     = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)
    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes   = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def scatter_add(src: ArrayLike, index: np.ndarray, size: int) -> Tensor:
    """ out[index[k]] += src[k] along the first axis """
    src   = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    out   = np.zeros((size,) + src.shape[1:])
    np.add.at(out, index, src.data)

    def backward(g):
        return (g[index],)
    return _result(out, (src,), backward)


# ------------------------------------------------------------------------------
# parameter registry
class AutoParams:
    """ Walk the attributes of a module and yield its parameters """
    def get_parameters(self) -> Iterator[Parameter]:
        for v in vars(self).values():
            yield from _walk(v)

    def named_parameters(self, prefix: str = '') -> Dict[str, Parameter]:
        params: Dict[str, Parameter] = {}
        for key, v in vars(self).items():
            for name, param in _walk_named(v, f'{prefix}{key}'):
                params[name] = param
        return params

    def zero_grad(self) -> None:
        for p in self.get_parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ValueError(f'Checkpoint is missing parameters: {missing}')
        for name, param in params.items():
            if state[name].shape != param.shape:
                raise ValueError(f'Shape mismatch for {name}: {state[name].shape} vs {param.shape}')
            param.data = np.array(state[name], dtype=np.float64)


def _walk(v) -> Iterator[Parameter]:
    if isinstance(v, Parameter):
        yield v
    elif isinstance(v, AutoParams):
        yield from v.get_parameters()
    elif isinstance(v, (list, tuple)):
        for item in v:
            yield from _walk(item)


def _walk_named(v, name: str) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(v, Parameter):
        yield name, v
    elif isinstance(v, AutoParams):
        yield from v.named_parameters(prefix=name + '.').items()
    elif isinstance(v, (list, tuple)):
        for idx, item in enumerate(v):
            yield from _walk_named(item, f'{name}.{idx}')


# ------------------------------------------------------------------------------
# layers
activations = {
    'relu':     relu,
    'sigmoid':  sigmoid,
    'softplus': softplus,
    'tanh':     tanh,
    'identity': identity,
}


class Linear(AutoParams):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 2.0) -> None:
        self.n_in   = n_in
        self.n_out  = n_out
        self.weight = Parameter(rng.normal(0.0, math.sqrt(gain / n_in), size=(n_in, n_out)))
        self.bias   = Parameter(np.zeros(n_out))

    def __call__(self, x: ArrayLike) -> Tensor:
        return matmul(x, self.weight) + self.bias


class MLP(AutoParams):
    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = 'relu', activate_last: bool = False) -> None:
        if len(sizes) < 2:
            raise ValueError(f'An MLP needs at least input and output sizes: {sizes}')
        self.layers        = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation    = activation
        self.activate_last = activate_last

    def __call__(self, x: ArrayLike) -> Tensor:
        params = [(layer.weight, layer.bias) for layer in self.layers]
        return mlp_forward(params, x, self.activation, self.activate_last)


def mlp_forward(params: Sequence[Tuple[ArrayLike, ArrayLike]], x: ArrayLike,
                activation: str = 'relu', activate_last: bool = False) -> Tensor:
    """ Affine map followed by `activation` for every layer (the last one only if asked) """
    if activation not in activations:
        raise ValueError(f'Unknown activation {activation}. Valid values: {list(activations)}')
    act = activations[activation]
    out = as_tensor(x)
    for idx, (weight, bias) in enumerate(params):
        weight = as_tensor(weight)
        if out.shape[-1] != weight.shape[0]:
            raise ValueError(f'Layer {idx}: input width {out.shape[-1]} does not match weight {weight.shape}')
        out = matmul(out, weight) + bias
        if idx < len(params) - 1 or activate_last:
            out = act(out)
    return out


# ------------------------------------------------------------------------------
# optimization
class LogLinearSchedule:
    """ Learning rate interpolated in log space from `start` to `end` """
    def __init__(self, start: float, end: float, steps: int) -> None:
        if start <= 0 or end <= 0:
            raise ValueError(f'Learning rates must be positive: {start}, {end}')
        self.start = start
        self.end   = end
        self.steps = max(int(steps), 1)

    def __call__(self, step: int) -> float:
        frac = min(max(step / self.steps, 0.0), 1.0)
        return math.exp((1.0 - frac) * math.log(self.start) + frac * math.log(self.end))


@dataclass
class OptimizerState:
    beta1:  float = 0.9
    beta2:  float = 0.999
    eps:    float = 1e-8
    step:   int   = 0
    first:  Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              lr: float, weight_decay: float = 0.0) -> Dict[str, np.ndarray]:
    """ One bias-corrected Adam update; parameters without a gradient are left alone """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise ValueError(f'Non-finite gradient in parameter {name}')

    state.step += 1
    b1, b2  = state.beta1, state.beta2
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        if grad.shape != value.shape:
            raise ValueError(f'Gradient shape {grad.shape} does not match parameter {name} {value.shape}')
        grad = grad + weight_decay * value
        m = state.first.get(name, np.zeros_like(value))
        v = state.second.get(name, np.zeros_like(value))
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.first[name]  = m
        state.second[name] = v
        m_hat = m / (1.0 - b1 ** state.step)
        v_hat = v / (1.0 - b2 ** state.step)
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


class Adam:
    def __init__(self, params: Dict[str, Parameter], lr: Union[float, Callable[[int], float]],
                 weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params       = params
        self.lr           = lr
        self.weight_decay = weight_decay
        self.state        = OptimizerState(beta1=beta1, beta2=beta2, eps=eps)

    def current_lr(self) -> float:
        return self.lr(self.state.step) if callable(self.lr) else self.lr

    def step(self) -> None:
        lr      = self.current_lr()
        values  = {name: p.data for name, p in self.params.items()}
        grads   = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        updated = adam_step(self.state, values, grads, lr, self.weight_decay)
        for name, p in self.params.items():
            p.data = updated[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ------------------------------------------------------------------------------
# gradient checking
def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], probes: int = 100,
              rng: Optional[np.random.Generator] = None, h: float = 1e-5) -> float:
    """ Largest relative error between backward() and central differences

    `fn` rebuilds the scalar output from the current contents of `tensors`.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    sizes = np.array([t.size for t in tensors])
    worst = 0.0
    for _ in range(probes):
        which = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        flat  = int(rng.integers(tensors[which].size))
        view  = tensors[which].data.reshape(-1)
        saved = view[flat]
        view[flat] = saved + h
        f_plus = fn().item()
        view[flat] = saved - h
        f_minus = fn().item()
        view[flat] = saved
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = float(relative_error(analytic[which].reshape(-1)[flat], numeric))
        worst = max(worst, err)
    return worst


def parameters_of(*modules: AutoParams) -> List[Parameter]:
    params: List[Parameter] = []
    for module in modules:
        params.extend(module.get_parameters())
    return params


def total_norm(tensors: Iterable[Tensor]) -> float:
    return float(math.sqrt(sum(float(np.sum(t.grad ** 2)) for t in tensors if t.grad is not None)))

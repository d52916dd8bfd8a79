"""
最小反向模式自动微分内核 + 模型所需的层

DiffValue 包装一个 float64 的 numpy 数组，记录计算图；backward 按逆拓扑序
传播梯度。每个计算图只在一个线程内从前向使用到反向；no_grad() 内不建图。
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ATTENTION_CHUNK_ELEMENTS, GRADCHECK_EPS, LEARNING_RATE


class NNError(ValueError):
    pass


class ShapeError(NNError):
    pass


class NonScalarLossError(NNError):
    pass


class MissingGradientError(NNError):
    pass


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """推理模式：当前线程内新建的节点不记录父节点和反向函数，中间结果随用随放"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class DiffValue:
    # 让 ndarray 与 DiffValue 的混合运算走 DiffValue 的反射运算符
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        parents: Sequence["DiffValue"] = (),
        op: str = "",
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        parents = tuple(parents) if is_grad_enabled() else ()
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._backward = None

    @property
    def _backward(self) -> Optional[Callable[[np.ndarray], None]]:
        return self._backward_fn

    @_backward.setter
    def _backward(self, fn: Optional[Callable[[np.ndarray], None]]) -> None:
        # 不需要梯度的节点不持有反向闭包
        self._backward_fn = fn if self.requires_grad else None

    # ------------------------------------------------------------------
    # 基本属性
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"DiffValue(shape={self.shape}, op={self.op!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    # ------------------------------------------------------------------
    # 运算符
    # ------------------------------------------------------------------
    def __add__(self, other):
        other = as_value(other)
        out = DiffValue(self.data + other.data, (self, other), "add")

        def _backward(g):
            self.accumulate(g)
            other.accumulate(g)

        out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = DiffValue(-self.data, (self,), "neg")
        out._backward = lambda g: self.accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_value(other))

    def __rsub__(self, other):
        return as_value(other) + (-self)

    def __mul__(self, other):
        other = as_value(other)
        out = DiffValue(self.data * other.data, (self, other), "mul")

        def _backward(g):
            self.accumulate(g * other.data)
            other.accumulate(g * self.data)

        out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_value(other)
        out = DiffValue(self.data / other.data, (self, other), "div")

        def _backward(g):
            self.accumulate(g / other.data)
            other.accumulate(-g * self.data / (other.data ** 2))

        out._backward = _backward
        return out

    def __rtruediv__(self, other):
        return as_value(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, DiffValue):
            raise NNError("only constant exponents are supported")
        out = DiffValue(self.data ** exponent, (self,), "pow")
        out._backward = lambda g: self.accumulate(g * exponent * self.data ** (exponent - 1))
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        out = DiffValue(self.data[index], (self,), "getitem")

        def _backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self.accumulate(full)

        out._backward = _backward
        return out

    # ------------------------------------------------------------------
    # 形状与归约
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = DiffValue(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate(np.broadcast_to(g, self.shape))

        out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        out = DiffValue(self.data.reshape(*shape), (self,), "reshape")
        out._backward = lambda g: self.accumulate(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        axes = axes if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        out = DiffValue(self.data.transpose(axes), (self,), "transpose")
        out._backward = lambda g: self.accumulate(g.transpose(inverse))
        return out

    def swapaxes(self, a: int, b: int):
        out = DiffValue(np.swapaxes(self.data, a, b), (self,), "swapaxes")
        out._backward = lambda g: self.accumulate(np.swapaxes(g, a, b))
        return out

    # ------------------------------------------------------------------
    # 逐元素函数
    # ------------------------------------------------------------------
    def exp(self):
        out = DiffValue(np.exp(self.data), (self,), "exp")
        out._backward = lambda g: self.accumulate(g * out.data)
        return out

    def log(self):
        out = DiffValue(np.log(self.data), (self,), "log")
        out._backward = lambda g: self.accumulate(g / self.data)
        return out

    def relu(self):
        out = DiffValue(np.maximum(self.data, 0.0), (self,), "relu")
        out._backward = lambda g: self.accumulate(g * (self.data > 0.0))
        return out


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def constant(x) -> DiffValue:
    return DiffValue(x)


def parameter(x) -> DiffValue:
    return DiffValue(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def custom_op(
    data: np.ndarray,
    parents: Sequence[DiffValue],
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str = "custom",
) -> DiffValue:
    """自定义算子：vjp(g) 返回每个父节点的梯度（None 表示不传播）"""
    out = DiffValue(data, parents, op)

    def _backward(g):
        for parent, pg in zip(parents, vjp(g)):
            if pg is not None:
                parent.accumulate(pg)

    out._backward = _backward
    return out


def matmul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = DiffValue(np.matmul(a.data, b.data), (a, b), "matmul")

    def _backward(g):
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        b2 = b.data[:, None] if b.ndim == 1 else b.data
        g2 = g.reshape(np.matmul(a2, b2).shape)
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            a.accumulate(_unbroadcast(ga, a2.shape).reshape(a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            b.accumulate(_unbroadcast(gb, b2.shape).reshape(b.shape))

    out._backward = _backward
    return out


def concat(values: Sequence[DiffValue], axis: int = -1) -> DiffValue:
    values = [as_value(v) for v in values]
    out = DiffValue(np.concatenate([v.data for v in values], axis=axis), values, "concat")
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def _backward(g):
        for v, part in zip(values, np.split(g, bounds, axis=axis)):
            v.accumulate(part)

    out._backward = _backward
    return out


def stack(values: Sequence[DiffValue], axis: int = 0) -> DiffValue:
    values = [as_value(v) for v in values]
    out = DiffValue(np.stack([v.data for v in values], axis=axis), values, "stack")

    def _backward(g):
        for i, v in enumerate(values):
            v.accumulate(np.take(g, i, axis=axis))

    out._backward = _backward
    return out


def backward(loss: DiffValue) -> None:
    """反向传播：迭代式拓扑排序，每个节点只访问一次"""
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")

    topo: List[DiffValue] = []
    visited = set()
    stack_: List[Tuple[DiffValue, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited and parent.requires_grad:
                stack_.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        # 中间节点的梯度用完即弃，只有叶子（参数）保留 .grad
        if node.parents and node is not loss:
            node.grad = None


# ----------------------------------------------------------------------
# 参数集合
# ----------------------------------------------------------------------
class ParamSet:
    """有序参数表：名字用点分路径，迭代顺序按字典序"""

    def __init__(self, params: Optional[Dict[str, DiffValue]] = None, prefix: str = ""):
        self._store: Dict[str, DiffValue] = {} if params is None else params
        self.prefix = prefix

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParamSet":
        return cls({name: parameter(value) for name, value in arrays.items()})

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> DiffValue:
        full = self._full(name)
        if full not in self._store:
            raise KeyError(f"unknown parameter: {full}")
        return self._store[full]

    def __setitem__(self, name: str, value) -> None:
        self._store[self._full(name)] = value if isinstance(value, DiffValue) else parameter(value)

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self._store

    def sub(self, prefix: str) -> "ParamSet":
        return ParamSet(self._store, self._full(prefix))

    def names(self) -> List[str]:
        if not self.prefix:
            return sorted(self._store)
        head = self.prefix + "."
        return sorted(n[len(head):] for n in self._store if n.startswith(head))

    def items(self) -> Iterator[Tuple[str, DiffValue]]:
        for name in self.names():
            yield name, self[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.names())

    def num_values(self) -> int:
        return sum(v.size for _, v in self.items())

    def zero_grad(self) -> None:
        for _, v in self.items():
            v.zero_grad()

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: v.data.copy() for name, v in self.items()}

    def copy(self) -> "ParamSet":
        return ParamSet.from_arrays(self.to_arrays())


# ----------------------------------------------------------------------
# 初始化：权重 uniform(-k, k)，k = 1/sqrt(fan_in)；偏置为 0；LayerNorm gamma=1, beta=0
# ----------------------------------------------------------------------
def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=(fan_in, fan_out))


def init_linear_params(rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str = "") -> Dict[str, np.ndarray]:
    head = f"{prefix}." if prefix else ""
    return {f"{head}W": init_weight(rng, fan_in, fan_out), f"{head}b": np.zeros(fan_out)}


def init_gru_params(rng: np.random.Generator, in_dim: int, hidden: int, prefix: str = "") -> Dict[str, np.ndarray]:
    head = f"{prefix}." if prefix else ""
    arrays = {}
    for gate in ("z", "r", "h"):
        arrays[f"{head}W_{gate}"] = init_weight(rng, in_dim, hidden)
        arrays[f"{head}U_{gate}"] = init_weight(rng, hidden, hidden)
        arrays[f"{head}b_{gate}"] = np.zeros(hidden)
    return arrays


def init_attention_params(rng: np.random.Generator, d: int, prefix: str = "") -> Dict[str, np.ndarray]:
    head = f"{prefix}." if prefix else ""
    return {f"{head}W_{name}": init_weight(rng, d, d) for name in ("Q", "K", "V", "O")}


def init_transformer_params(rng: np.random.Generator, d: int, d_ff: int, prefix: str = "") -> Dict[str, np.ndarray]:
    head = f"{prefix}." if prefix else ""
    arrays = {
        f"{head}ln1.gamma": np.ones(d),
        f"{head}ln1.beta": np.zeros(d),
        f"{head}ln2.gamma": np.ones(d),
        f"{head}ln2.beta": np.zeros(d),
        f"{head}ffn.W1": init_weight(rng, d, d_ff),
        f"{head}ffn.b1": np.zeros(d_ff),
        f"{head}ffn.W2": init_weight(rng, d_ff, d),
        f"{head}ffn.b2": np.zeros(d),
    }
    arrays.update(init_attention_params(rng, d, prefix=f"{head}attn"))
    return arrays


# ----------------------------------------------------------------------
# 层
# ----------------------------------------------------------------------
def linear(x, W: DiffValue, b: Optional[DiffValue] = None) -> DiffValue:
    """y = xW + b，b 在前导维度上广播"""
    x = as_value(x)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    y = matmul(x, W)
    if b is not None:
        if b.shape[-1] != W.shape[1]:
            raise ShapeError(f"linear: bias dim {b.shape[-1]} != weight cols {W.shape[1]}")
        y = y + b
    return y


def sigmoid(x) -> DiffValue:
    x = as_value(x)
    # 数值稳定写法，避免 exp 溢出
    data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )
    out = DiffValue(data, (x,), "sigmoid")
    out._backward = lambda g: x.accumulate(g * out.data * (1.0 - out.data))
    return out


def tanh_act(x) -> DiffValue:
    x = as_value(x)
    out = DiffValue(np.tanh(x.data), (x,), "tanh")
    out._backward = lambda g: x.accumulate(g * (1.0 - out.data ** 2))
    return out


def relu(x) -> DiffValue:
    return as_value(x).relu()


def softmax(x, axis: int = -1) -> DiffValue:
    x = as_value(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = DiffValue(e / e.sum(axis=axis, keepdims=True), (x,), "softmax")

    def _backward(g):
        y = out.data
        x.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward = _backward
    return out


def layer_norm(x, gamma: DiffValue, beta: DiffValue, eps: float = 1e-5) -> DiffValue:
    """沿最后一维归一化；前向和反向各只保留一份 xhat"""
    x = as_value(x)
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(((x.data - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * rstd

    def vjp(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, g * xhat, g

    return custom_op(xhat * gamma.data + beta.data, (x, gamma, beta), vjp, "layer_norm")


def _gru_update(xz, xr, xh, h_prev: DiffValue, p: ParamSet) -> DiffValue:
    z = sigmoid(xz + matmul(h_prev, p["U_z"]))
    r = sigmoid(xr + matmul(h_prev, p["U_r"]))
    h_tilde = tanh_act(xh + matmul(r * h_prev, p["U_h"]))
    return (1.0 - z) * h_prev + z * h_tilde


def gru_cell(x_t, h_prev, p: ParamSet) -> DiffValue:
    """h_t = (1 - z) * h_prev + z * h~"""
    x_t, h_prev = as_value(x_t), as_value(h_prev)
    if h_prev.shape[-1] != p["U_z"].shape[0]:
        raise ShapeError(f"gru_cell: hidden size {h_prev.shape[-1]} != {p['U_z'].shape[0]}")
    xz = linear(x_t, p["W_z"], p["b_z"])
    xr = linear(x_t, p["W_r"], p["b_r"])
    xh = linear(x_t, p["W_h"], p["b_h"])
    return _gru_update(xz, xr, xh, h_prev, p)


def _gru_scan(seq: DiffValue, p: ParamSet, reverse: bool) -> DiffValue:
    # 输入投影对所有时间步一次算完，循环里只剩递归部分
    xz = linear(seq, p["W_z"], p["b_z"])
    xr = linear(seq, p["W_r"], p["b_r"])
    xh = linear(seq, p["W_h"], p["b_h"])
    steps = seq.shape[0]
    h = constant(np.zeros(p["U_z"].shape[0]))
    outputs: List[Optional[DiffValue]] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h = _gru_update(xz[t], xr[t], xh[t], h, p)
        outputs[t] = h
    return stack(outputs, axis=0)


def bgru(seq, p_fwd: ParamSet, p_bwd: ParamSet) -> DiffValue:
    """双向 GRU，输出 [T, 2H] = [h_fwd[t], h_bwd[t]]"""
    seq = as_value(seq)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ShapeError(f"bgru needs a non-empty [T, in] sequence, got {seq.shape}")
    if p_fwd["U_z"].shape != p_bwd["U_z"].shape:
        raise ShapeError("bgru: forward and backward hidden sizes differ")
    fwd = _gru_scan(seq, p_fwd, reverse=False)
    bwd = _gru_scan(seq, p_bwd, reverse=True)
    return concat([fwd, bwd], axis=-1)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention_core(Q: DiffValue, K: DiffValue, V: DiffValue) -> DiffValue:
    """softmax(Q K^T / sqrt(dk)) V，按前导维分块计算

    完整的 [..., L, L] 分数矩阵从不同时驻留内存：反向时逐块重算注意力权重。
    """
    shape = Q.shape
    L, width = shape[-2], shape[-1]
    scale = 1.0 / np.sqrt(width)
    q = Q.data.reshape(-1, L, width)
    k = K.data.reshape(-1, L, width)
    v = V.data.reshape(-1, L, width)
    rows = q.shape[0]
    chunk = max(1, ATTENTION_CHUNK_ELEMENTS // (L * L))
    blocks = [slice(start, start + chunk) for start in range(0, rows, chunk)]

    def weights(s: slice) -> np.ndarray:
        return _softmax_rows(np.matmul(q[s], np.swapaxes(k[s], -1, -2)) * scale)

    out = np.empty_like(q)
    for s in blocks:
        out[s] = np.matmul(weights(s), v[s])

    def vjp(g):
        g = g.reshape(-1, L, width)
        dq, dk, dv = np.empty_like(q), np.empty_like(k), np.empty_like(v)
        for s in blocks:
            P = weights(s)
            dv[s] = np.matmul(np.swapaxes(P, -1, -2), g[s])
            dP = np.matmul(g[s], np.swapaxes(v[s], -1, -2))
            dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
            dq[s] = np.matmul(dS, k[s])
            dk[s] = np.matmul(np.swapaxes(dS, -1, -2), q[s])
        return dq.reshape(shape), dk.reshape(shape), dv.reshape(shape)

    return custom_op(out.reshape(shape), (Q, K, V), vjp, "attention")


def multi_head_attention(X, p: ParamSet, heads: int, return_weights: bool = False):
    """多头自注意力，X: [..., L, d]；无因果掩码，无位置项

    return_weights=True 时额外返回 [..., h, L, L] 注意力权重（常量，不参与求导）。
    """
    X = as_value(X)
    d = X.shape[-1]
    if heads <= 0 or d % heads:
        raise ShapeError(f"d_model {d} not divisible by heads {heads}")
    dk = d // heads
    lead = X.shape[:-2]
    L = X.shape[-2]

    def split_heads(v: DiffValue) -> DiffValue:
        # [..., L, d] -> [..., h, L, dk]
        return v.reshape(*lead, L, heads, dk).swapaxes(-3, -2)

    Q = split_heads(matmul(X, p["W_Q"]))
    K = split_heads(matmul(X, p["W_K"]))
    V = split_heads(matmul(X, p["W_V"]))
    context = _attention_core(Q, K, V).swapaxes(-3, -2).reshape(*lead, L, d)
    out = matmul(context, p["W_O"])
    if return_weights:
        scores = np.matmul(Q.data, np.swapaxes(K.data, -1, -2)) / np.sqrt(dk)
        return out, constant(_softmax_rows(scores))
    return out


def transformer_layer(X, p: ParamSet, heads: int, pos: Optional[np.ndarray] = None) -> DiffValue:
    """pre-norm 残差层；位置编码只加在注意力子层的输入上，不进入残差流"""
    X = as_value(X)
    if X.shape[-1] != p["ln1.gamma"].shape[0]:
        raise ShapeError(f"transformer_layer: input dim {X.shape[-1]} != {p['ln1.gamma'].shape[0]}")
    attn_in = X if pos is None else X + constant(pos)
    X1 = X + multi_head_attention(layer_norm(attn_in, p["ln1.gamma"], p["ln1.beta"]), p.sub("attn"), heads)
    hidden = relu(linear(layer_norm(X1, p["ln2.gamma"], p["ln2.beta"]), p["ffn.W1"], p["ffn.b1"]))
    return X1 + linear(hidden, p["ffn.W2"], p["ffn.b2"])


def positional_encoding(L: int, d: int) -> np.ndarray:
    """正弦位置编码 PE[p, 2i] = sin(p / 10000^(2i/d))，PE[p, 2i+1] = cos(...)"""
    if d % 2:
        raise ShapeError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    rates = 1.0 / 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((L, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe


# ----------------------------------------------------------------------
# 梯度检查
# ----------------------------------------------------------------------
def grad_check(
    f: Callable[[], DiffValue],
    p: ParamSet,
    eps: float = GRADCHECK_EPS,
    coords_per_param: Optional[int] = None,
    grad_hook: Optional[Callable[[str, np.ndarray], np.ndarray]] = None,
    per_param: bool = False,
    seed: int = 0,
):
    """解析梯度 vs 中心差分，返回 max |a - n| / max(1e-8, |a| + |n|)

    coords_per_param 不为 None 时，每个参数只随机抽查这么多个坐标。
    """
    p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {}
    for name, value in p.items():
        g = np.zeros_like(value.data) if value.grad is None else value.grad.copy()
        if grad_hook is not None:
            g = grad_hook(name, g)
        analytic[name] = g
    p.zero_grad()

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, value in p.items():
        flat = value.data.reshape(-1)
        coords = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            coords = np.sort(rng.choice(flat.size, size=coords_per_param, replace=False))
        worst = 0.0
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            f_plus = f().item()
            flat[i] = original - eps
            f_minus = f().item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
        logging.debug(f"grad_check {name}: max rel err {worst:.3e}")

    overall = max(errors.values()) if errors else 0.0
    if per_param:
        return overall, errors
    return overall


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, p: ParamSet) -> "AdamState":
        return cls(
            m={name: np.zeros_like(v.data) for name, v in p.items()},
            v={name: np.zeros_like(v.data) for name, v in p.items()},
            t=0,
        )


def adam_step(
    p: ParamSet,
    state: AdamState,
    lr: float = LEARNING_RATE,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """带偏差修正的 Adam，原地更新后清空梯度"""
    missing = [name for name, v in p.items() if v.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for parameters: {', '.join(missing[:5])}")

    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, value in p.items():
        g = value.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(value.data)
            state.v[name] = np.zeros_like(value.data)
        if state.m[name].shape != value.shape:
            raise ShapeError(f"adam moment shape {state.m[name].shape} != parameter {name} {value.shape}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        value.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    p.zero_grad()

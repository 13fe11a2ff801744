"""Reference architectures and the shared training loop.

Networks are ordered stacks of layers with uniquely named parameters.
Weight initialization is Kaiming-uniform from per-layer streams spawned
off a single root seed, so rebuilding with the same seed is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ShapeError
from .optim import SGD
from .tensor import (DEFAULT_DTYPE, Tensor, conv2d, flatten, linear,
                     maxpool2d, relu, softmax_cross_entropy)


@dataclass
class LayerSpec:
    kind: str                       # conv | dense | relu | maxpool | flatten
    name: str
    compressible: bool = False
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    in_dim: int | None = None
    out_dim: int | None = None
    pool: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None and v is not False}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**{**{"compressible": False}, **d})


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Layer:
    spec: LayerSpec

    @property
    def name(self):
        return self.spec.name

    def params(self) -> dict[str, Tensor]:
        return {}

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2d(_Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.spec = spec
        s = spec
        fan_in = s.in_channels * s.kernel * s.kernel
        self.weight = Tensor(
            _kaiming_uniform(rng, (s.out_channels, s.in_channels, s.kernel, s.kernel),
                             fan_in, dtype),
            requires_grad=True, name=f"{s.name}.weight")
        self.bias = Tensor(np.zeros(s.out_channels, dtype=dtype),
                           requires_grad=True, name=f"{s.name}.bias")

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias,
                      stride=self.spec.stride or 1, padding=self.spec.padding or 0)


class Dense(_Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.spec = spec
        self.weight = Tensor(
            _kaiming_uniform(rng, (spec.out_dim, spec.in_dim), spec.in_dim, dtype),
            requires_grad=True, name=f"{spec.name}.weight")
        self.bias = Tensor(np.zeros(spec.out_dim, dtype=dtype),
                           requires_grad=True, name=f"{spec.name}.bias")

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class ReLU(_Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def __call__(self, x):
        return relu(x)


class MaxPool2d(_Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def __call__(self, x):
        return maxpool2d(x, kernel=self.spec.pool or 2, stride=self.spec.stride)


class Flatten(_Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def __call__(self, x):
        return flatten(x)


_LAYER_KINDS = {"conv": Conv2d, "dense": Dense, "relu": ReLU,
                "maxpool": MaxPool2d, "flatten": Flatten}


class Network:
    """Ordered layers plus a parameter store keyed by layer name."""

    def __init__(self, specs: list[LayerSpec], seed: int = 0, dtype=DEFAULT_DTYPE):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise InputError("layer names must be unique")
        for s in specs:
            if s.compressible and s.kind not in ("conv", "dense"):
                raise InputError(f"layer {s.name!r}: only conv/dense are compressible")
        self.specs = specs
        self.seed = seed
        self.dtype = dtype
        self.model_name = "net"
        streams = np.random.SeedSequence(seed).spawn(len(specs))
        self.layers: list[_Layer] = []
        for spec, ss in zip(specs, streams):
            cls = _LAYER_KINDS.get(spec.kind)
            if cls is None:
                raise InputError(f"unknown layer kind {spec.kind!r}")
            rng = np.random.Generator(np.random.PCG64(ss))
            layer = cls(spec, rng, dtype) if spec.kind in ("conv", "dense") else cls(spec)
            self.layers.append(layer)
        self._by_name = {l.name: l for l in self.layers}

    def forward(self, x: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(x, dtype=self.dtype))
        for layer in self.layers:
            t = layer(t)
        return t

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            for key, p in layer.params().items():
                out[f"{layer.name}.{key}"] = p
        return out

    def compressible_layers(self) -> list[str]:
        return [s.name for s in self.specs if s.compressible]

    def weight(self, layer_name: str) -> Tensor:
        layer = self._by_name.get(layer_name)
        if layer is None or "weight" not in layer.params():
            raise InputError(f"no weight parameter on layer {layer_name!r}")
        return layer.params()["weight"]

    def weight_count(self, compressible_only: bool = True) -> int:
        """Number of weight entries (biases excluded)."""
        total = 0
        for s in self.specs:
            if compressible_only and not s.compressible:
                continue
            if s.kind == "conv":
                total += s.out_channels * s.in_channels * s.kernel * s.kernel
            elif s.kind == "dense":
                total += s.out_dim * s.in_dim
        return total

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        params = self.parameters()
        for name, arr in arrays.items():
            if name not in params:
                raise InputError(f"unknown parameter {name!r}")
            if params[name].data.shape != arr.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != "
                                 f"{params[name].data.shape}")
            params[name].data = arr.astype(self.dtype, copy=True)

    def clone(self) -> "Network":
        net = Network(self.specs, seed=self.seed, dtype=self.dtype)
        net.model_name = self.model_name
        net.load_state(self.state_arrays())
        return net


def build_lenet5(seed: int = 0, dtype=DEFAULT_DTYPE) -> Network:
    """The 20/50/500 conv-pool-conv-pool-dense-dense topology for 28x28x1 input."""
    specs = [
        LayerSpec("conv", "conv1", compressible=True, in_channels=1,
                  out_channels=20, kernel=5, stride=1, padding=0),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", pool=2, stride=2),
        LayerSpec("conv", "conv2", compressible=True, in_channels=20,
                  out_channels=50, kernel=5, stride=1, padding=0),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2", pool=2, stride=2),
        LayerSpec("flatten", "flat"),
        LayerSpec("dense", "fc1", compressible=True, in_dim=800, out_dim=500),
        LayerSpec("relu", "relu3"),
        LayerSpec("dense", "fc2", compressible=True, in_dim=500, out_dim=10),
    ]
    net = Network(specs, seed=seed, dtype=dtype)
    net.model_name = "lenet5"
    return net


def build_mlp(dims: list[int], seed: int = 0, dtype=DEFAULT_DTYPE) -> Network:
    """Dense/relu stack over flat inputs; dims = [in, hidden..., out]."""
    if len(dims) < 2:
        raise InputError("build_mlp needs at least [in_dim, out_dim]")
    specs = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        specs.append(LayerSpec("dense", f"fc{i}", compressible=True, in_dim=a, out_dim=b))
        if i < len(dims) - 1:
            specs.append(LayerSpec("relu", f"relu{i}"))
    net = Network(specs, seed=seed, dtype=dtype)
    net.model_name = "mlp-" + "-".join(str(d) for d in dims)
    return net


def build_from_specs(specs: list[LayerSpec], seed: int = 0, dtype=DEFAULT_DTYPE) -> Network:
    return Network(specs, seed=seed, dtype=dtype)


def step_decay(lr0: float, epochs: int):
    """lr0, cut 10x at 50% and again at 75% of the epoch budget."""
    def lr_at(epoch: int) -> float:
        lr = lr0
        if epochs >= 2 and epoch >= epochs // 2:
            lr *= 0.1
        if epochs >= 4 and epoch >= (3 * epochs) // 4:
            lr *= 0.1
        return lr
    return lr_at


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)

    def best_so_far(self) -> list[float]:
        best, out = -1.0, []
        for a in self.test_accuracy:
            best = max(best, a)
            out.append(best)
        return out


def evaluate(net: Network, dataset, batch_size: int = 500) -> float:
    """Fraction of correctly classified samples; invariant to batch size."""
    correct = 0
    n = len(dataset.labels)
    for lo in range(0, n, batch_size):
        xb = dataset.images[lo:lo + batch_size]
        yb = dataset.labels[lo:lo + batch_size]
        logits = net.forward(xb).data
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / n


def run_epochs(net: Network, dataset, epochs: int, *, lr_at, momentum=0.9,
               weight_decay=0.0, batch_size=100, rng: np.random.Generator,
               penalty_fn=None, grad_masks=None, eval_dataset=None,
               post_step=None, trace: TrainTrace | None = None,
               epoch_offset: int = 0) -> TrainTrace:
    """Shared SGD loop used by plain training, ADMM subproblem 1, the
    fixed-regularization baselines and masked retraining.

    ``penalty_fn(net)`` may return a scalar Tensor added to the task loss;
    ``post_step(net)`` runs after each optimizer step (projected descent).
    """
    trace = trace if trace is not None else TrainTrace()
    params = net.parameters()
    n = len(dataset.labels)
    opt = SGD(lr=max(lr_at(epoch_offset), 1e-12), momentum=momentum,
              weight_decay=weight_decay)
    for epoch in range(epochs):
        opt.lr = lr_at(epoch_offset + epoch)
        perm = rng.permutation(n)
        total_loss = 0.0
        nbatches = 0
        for lo in range(0, n, batch_size):
            sel = perm[lo:lo + batch_size]
            loss = softmax_cross_entropy(net.forward(dataset.images[sel]),
                                         dataset.labels[sel])
            if penalty_fn is not None:
                loss = loss + penalty_fn(net)
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericError(f"non-finite loss at epoch {epoch_offset + epoch}")
            opt.zero_grad(params)
            loss.backward()
            opt.step(params, grad_masks=grad_masks)
            if post_step is not None:
                post_step(net)
            total_loss += lval
            nbatches += 1
        trace.train_loss.append(total_loss / max(nbatches, 1))
        if eval_dataset is not None:
            trace.test_accuracy.append(evaluate(net, eval_dataset))
    return trace


def train(net: Network, dataset, epochs: int, *, lr: float = 0.01,
          momentum: float = 0.9, weight_decay: float = 0.0,
          batch_size: int = 100, seed: int = 0,
          eval_dataset=None, lr_schedule=None) -> TrainTrace:
    """Train in place with the step-decay schedule; returns the accuracy trace."""
    if len(dataset.labels) == 0:
        raise InputError("dataset is empty")
    if epochs == 0:
        return TrainTrace()
    lr_at = lr_schedule if lr_schedule is not None else step_decay(lr, epochs)
    rng = np.random.Generator(np.random.PCG64(seed))
    return run_epochs(net, dataset, epochs, lr_at=lr_at, momentum=momentum,
                      weight_decay=weight_decay, batch_size=batch_size,
                      rng=rng, eval_dataset=eval_dataset)

"""
Layers with explicit forward/backward.

Every layer keeps whatever its backward pass needs from the most recent
forward call; backward without a preceding forward raises TrainingError.
Parameters live in `params` and are updated in place by the optimizer, so
`grads` always has the same keys and shapes.
"""
from typing import Optional

import numpy as np

from ..config import settings
from ..core.tensor import (
    ConvSpec,
    Tensor,
    batch_norm,
    batch_norm_backward,
    conv2d_backward,
    conv2d_from_patches,
    relu,
    relu_backward,
    unfold,
)
from ..errors import NegativeInputError, TrainingError
from ..services.backprop import CnmfTrajectory, cnmf_backward, cnmf_record, cnmf_unrolled_backward
from ..services.nmf_layer import NmfParams, cnmf_forward_state
from .enums import BackwardEngine, GradMode


class Layer:
    # "nmf" or "conv"; batch-norm and 1x1 layers count as conv parameters
    family = "conv"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def backward(self, dout: Tensor) -> Tensor:
        raise NotImplementedError

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _missing_forward(self) -> TrainingError:
        return TrainingError(f"{self.name}: backward called without a forward pass")


class Conv2d(Layer):
    def __init__(self, name: str, spec: ConvSpec, rng: np.random.Generator, dtype: np.dtype):
        super().__init__(name)
        self.spec = spec
        fan_in = spec.patch_size
        shape = (spec.out_channels, spec.in_per_group, spec.kernel_h, spec.kernel_w)
        self.params["weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(spec.out_channels, dtype=dtype)
        self._cache: Optional[tuple] = None
        self.zero_grad()

    def forward(self, x: Tensor, training: bool) -> Tensor:
        patches = unfold(x, self.spec)
        self._cache = (patches, x.shape)
        return conv2d_from_patches(patches, self.params["weight"], self.spec, x.shape, self.params["bias"])

    def backward(self, dout: Tensor) -> Tensor:
        if self._cache is None:
            raise self._missing_forward()
        patches, x_shape = self._cache
        dx, dw, db = conv2d_backward(dout, patches, self.params["weight"], self.spec, x_shape)
        self.grads["weight"] = dw
        self.grads["bias"] = db
        return dx


class Cnmf(Layer):
    family = "nmf"

    def __init__(
        self,
        name: str,
        spec: ConvSpec,
        rng: np.random.Generator,
        dtype: np.dtype,
        n_iters: int,
        epsilon: float,
        engine: BackwardEngine = BackwardEngine.APPROX,
        grad_mode: GradMode = GradMode.DIRECT,
    ):
        super().__init__(name)
        self.spec = spec
        self.nmf = NmfParams.init(spec.patch_size, spec.out_per_group, rng, groups=spec.groups, dtype=dtype)
        self.params["U"] = self.nmf.U
        self.n_iters = n_iters
        self.epsilon = epsilon
        self.engine = BackwardEngine(engine)
        self.grad_mode = GradMode(grad_mode)
        self._state = None
        self.zero_grad()

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if settings.DEBUG_CHECKS and x.min() < 0:
            raise NegativeInputError(f"{self.name}: NMF layer received negative input")
        self.nmf.U = self.params["U"]
        if self.engine == BackwardEngine.UNROLLED and training:
            self._state = cnmf_record(x, self.nmf, self.spec, self.n_iters, self.epsilon)
        else:
            self._state = cnmf_forward_state(x, self.nmf, self.spec, self.n_iters, self.epsilon)
        return self._state.output

    def backward(self, dout: Tensor) -> Tensor:
        if self._state is None:
            raise self._missing_forward()
        if self.engine == BackwardEngine.UNROLLED:
            if not isinstance(self._state, CnmfTrajectory):
                raise TrainingError(f"{self.name}: unrolled backward needs a training-mode forward")
            dx, grad_u = cnmf_unrolled_backward(dout, self._state, self.nmf)
        else:
            dx, grad_u = cnmf_backward(dout, self._state, self.nmf, self.grad_mode)
        self.grads["U"] = grad_u
        return dx


class BatchNorm2d(Layer):
    def __init__(self, name: str, channels: int, dtype: np.dtype):
        super().__init__(name)
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache: Optional[tuple] = None
        self.zero_grad()

    def forward(self, x: Tensor, training: bool) -> Tensor:
        out, self._cache = batch_norm(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            training,
        )
        return out

    def backward(self, dout: Tensor) -> Tensor:
        if self._cache is None:
            raise TrainingError(f"{self.name}: backward needs a training-mode forward")
        dx, dgamma, dbeta = batch_norm_backward(dout, self._cache)
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        return dx


class ReLU(Layer):
    def __init__(self, name: str):
        super().__init__(name)
        self._out: Optional[Tensor] = None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        self._out = relu(x)
        return self._out

    def backward(self, dout: Tensor) -> Tensor:
        if self._out is None:
            raise self._missing_forward()
        return relu_backward(dout, self._out)

"""Execution wrapper over torch autograd, plus checkpoints and determinism helpers."""
import contextlib
import json
import logging
import random
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "f32le"


class EngineError(RuntimeError):
    """Graph used out of order (e.g. backward before forward)."""


class ShapeError(ValueError):
    """Tensor shapes do not fit the op; ``node`` is the dotted module path."""

    def __init__(self, message: str, node: str):
        super().__init__(f"{node}: {message}")
        self.node = node


class Graph:
    """Single-pass forward/backward driver around an ``nn.Module``.

    Not thread-safe: one pass per instance at a time.
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self._outputs = None
        self._current: List[str] = []
        for name, sub in module.named_modules():
            sub.register_forward_pre_hook(self._enter(name or type(module).__name__))
            sub.register_forward_hook(self._leave)

    def _enter(self, name):
        def hook(_module, _inputs):
            self._current.append(name)
        return hook

    def _leave(self, _module, _inputs, _output):
        if self._current:
            self._current.pop()

    def forward(self, *inputs: torch.Tensor):
        self._current.clear()
        try:
            self._outputs = self.module(*inputs)
        except RuntimeError as e:
            node = self._current[-1] if self._current else type(self.module).__name__
            self._current.clear()
            raise ShapeError(str(e).splitlines()[0], node) from e
        return self._outputs

    __call__ = forward

    def backward(self, loss: torch.Tensor, loss_grad: Optional[torch.Tensor] = None
                 ) -> Dict[str, torch.Tensor]:
        """Back-propagate ``loss`` and return gradients of every parameter that has one."""
        if self._outputs is None:
            raise EngineError("backward called before forward")
        if loss_grad is None and loss.numel() != 1:
            raise EngineError("loss must be a scalar when no upstream gradient is given")
        loss.backward(loss_grad)
        self._outputs = None
        return self.parameter_gradients()

    def parameter_gradients(self) -> Dict[str, torch.Tensor]:
        return {name: p.grad for name, p in self.module.named_parameters() if p.grad is not None}


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


@contextlib.contextmanager
def deterministic_kernels() -> Iterator[None]:
    """Single thread, no oneDNN, deterministic algorithms; restores the previous state."""
    threads = torch.get_num_threads()
    mkldnn = torch.backends.mkldnn.enabled
    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.backends.mkldnn.enabled = False
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.backends.mkldnn.enabled = mkldnn
        torch.use_deterministic_algorithms(deterministic)


def check_gradients(module: nn.Module, inputs: Sequence[torch.Tensor], eps: float = 1e-6,
                    atol: float = 1e-5, rtol: float = 1e-4,
                    include_parameters: bool = True) -> bool:
    """Compare autograd with central finite differences in double precision.

    Raises ``torch.autograd.gradcheck.GradcheckError`` on mismatch.
    """
    module = module.double()
    inputs = tuple(x.detach().double().requires_grad_(True) for x in inputs)
    names = [n for n, p in module.named_parameters() if p.requires_grad] if include_parameters else []
    params = tuple(module.get_parameter(n).detach().double().requires_grad_(True) for n in names)

    def fn(*args):
        xs, ps = args[:len(inputs)], args[len(inputs):]
        return functional_call(module, dict(zip(names, ps)), xs)

    return torch.autograd.gradcheck(fn, inputs + params, eps=eps, atol=atol, rtol=rtol)


def save_checkpoint(module: nn.Module, path: Union[str, Path],
                    extra: Optional[Dict] = None) -> Path:
    """Write every tensor of ``module.state_dict()`` as little-endian float32.

    A JSON sidecar next to the ``.bin`` maps name -> shape, byte offset, dtype.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    offset = 0
    with open(path, "wb") as f:
        for name, tensor in module.state_dict().items():
            data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
            f.write(data.tobytes(order="C"))
            tensors[name] = {"shape": list(tensor.shape), "offset": offset,
                             "dtype": str(tensor.dtype).replace("torch.", "")}
            offset += data.nbytes
    sidecar = {"format": CHECKPOINT_FORMAT, "bytes": offset, "tensors": tensors}
    if extra:
        sidecar["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    logger.debug("Saved %d tensors (%d bytes) to %s", len(tensors), offset, path)
    return path


def read_checkpoint_sidecar(path: Union[str, Path]) -> Dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_checkpoint(module: nn.Module, path: Union[str, Path], strict: bool = True) -> Dict:
    """Inverse of ``save_checkpoint``; returns the sidecar's ``extra`` block."""
    path = Path(path)
    sidecar = read_checkpoint_sidecar(path)
    if sidecar.get("format") != CHECKPOINT_FORMAT:
        raise EngineError(f"{path}: unknown checkpoint format {sidecar.get('format')!r}")
    flat = np.fromfile(path, dtype="<f4")
    if flat.nbytes != sidecar["bytes"]:
        raise EngineError(f"{path}: expected {sidecar['bytes']} bytes, found {flat.nbytes}")
    current = module.state_dict()
    state = {}
    for name, meta in sidecar["tensors"].items():
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"] // 4
        values = torch.from_numpy(flat[start:start + count].copy()).reshape(meta["shape"])
        dtype = current[name].dtype if name in current else torch.float32
        state[name] = values.to(dtype)
    module.load_state_dict(state, strict=strict)
    return sidecar.get("extra", {})

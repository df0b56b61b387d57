"""Deterministic demo workloads for protected runs and calibration.

Every workload is a pure function of its input bytes: integer matrix multiply
(no floating point, so results are bit-exact by construction), a keyed-size
BLAKE2b digest, and a plain spin loop for calibration and timing experiments.
Inputs are generated from a seed so two invocations with the same id and seed
are byte-identical end to end.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .core import PayloadSpec

_DEFAULT_PARAMS = {"matmul": 128, "checksum": 65536, "spin": 5_000_000}
_VALUE_BOUND = 1 << 20  # |a|,|b| < 2^20 keeps n<=4096 matmuls inside int64


@dataclass(frozen=True)
class Workload:
    """A named computation plus the payload it runs on."""

    name: str
    param: int
    seed: int
    payload: PayloadSpec
    computation: Callable[[Sequence[memoryview], Sequence[memoryview]], object]

    @property
    def ident(self) -> str:
        return f"{self.name}:{self.param}"


def _matmul(inputs: Sequence[memoryview], outputs: Sequence[memoryview]) -> None:
    a_flat = np.frombuffer(inputs[0], dtype=np.int64)
    b_flat = np.frombuffer(inputs[1], dtype=np.int64)
    n = math.isqrt(len(a_flat))
    product = a_flat.reshape(n, n) @ b_flat.reshape(n, n)
    outputs[0][:] = product.tobytes()


def _checksum(inputs: Sequence[memoryview], outputs: Sequence[memoryview]) -> None:
    digest = hashlib.blake2b(inputs[0], digest_size=len(outputs[0])).digest()
    outputs[0][:] = digest


def _spin(inputs: Sequence[memoryview], outputs: Sequence[memoryview]) -> None:
    iters = int.from_bytes(inputs[0], "little")
    acc = 0
    i = 0
    while i < iters:
        acc = (acc + i) & 0xFFFFFFFF
        i += 1
    outputs[0][:] = acc.to_bytes(8, "little")


def matmul_workload(n: int = 128, seed: int = 0) -> Workload:
    """n x n int64 matrix product; exact in integers, heavy in memory traffic."""
    if n < 1:
        raise ValueError("matrix size must be >= 1")
    rng = np.random.default_rng(seed)
    a = rng.integers(-_VALUE_BOUND, _VALUE_BOUND, size=(n, n), dtype=np.int64)
    b = rng.integers(-_VALUE_BOUND, _VALUE_BOUND, size=(n, n), dtype=np.int64)
    nbytes = n * n * 8
    payload = PayloadSpec.of([a.tobytes(), b.tobytes()], [nbytes, nbytes], [nbytes])
    return Workload(name="matmul", param=n, seed=seed, payload=payload, computation=_matmul)


def checksum_workload(nbytes: int = 65536, seed: int = 0, digest_size: int = 16) -> Workload:
    """BLAKE2b digest of seeded random bytes; small output, easy to bit-flip."""
    if nbytes < 1:
        raise ValueError("input size must be >= 1")
    if not 1 <= digest_size <= 64:
        raise ValueError("digest size must be 1..64")
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 256, size=nbytes, dtype=np.uint8).tobytes()
    payload = PayloadSpec.of([data], [nbytes], [digest_size])
    return Workload(name="checksum", param=nbytes, seed=seed, payload=payload, computation=_checksum)


def spin_workload(iters: int = 5_000_000, seed: int = 0) -> Workload:
    """A counted arithmetic loop; progress scales directly with iterations."""
    if iters < 1:
        raise ValueError("iteration count must be >= 1")
    payload = PayloadSpec.of([iters.to_bytes(8, "little")], [8], [8])
    return Workload(name="spin", param=iters, seed=seed, payload=payload, computation=_spin)


_BUILDERS = {
    "matmul": matmul_workload,
    "checksum": checksum_workload,
    "spin": spin_workload,
}


def parse_workload_id(ident: str, seed: int = 0) -> Workload:
    """Build a workload from 'name' or 'name:param' text, e.g. 'matmul:256'."""
    name, _, param_text = ident.strip().partition(":")
    if name not in _BUILDERS:
        raise ValueError(
            f"unknown workload {name!r} (expected one of {', '.join(sorted(_BUILDERS))})"
        )
    if param_text:
        try:
            param = int(param_text)
        except ValueError:
            raise ValueError(f"workload parameter must be an integer, got {param_text!r}") from None
    else:
        param = _DEFAULT_PARAMS[name]
    return _BUILDERS[name](param, seed=seed)


def direct_run(workload: Workload) -> list[bytes]:
    """Run the wrapper once in this process; the reference for comparison tests."""
    outputs = [bytearray(size) for size in workload.payload.output_sizes]
    views = [memoryview(buf) for buf in outputs]
    input_views = [memoryview(data) for data in workload.payload.inputs]
    workload.computation(input_views, views)
    return [bytes(buf) for buf in outputs]

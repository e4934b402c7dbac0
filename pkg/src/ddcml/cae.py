"""Convolutional autoencoder: four encoder blocks with two residual
bypasses, a linear 1x1x1 bottleneck producing the embedding, and a
mirrored decoder built from unpooling and transposed convolutions.

Spatial dims halve at each of the four pools, so the embedding length is
(X/16)*(Y/16)*(Z/16)*bottleneck_channels; with one bottleneck channel the
compression ratio is exactly 4096:1 regardless of input size.

Volumes enter the network scaled to [0, 1] (gray levels divided by 255);
reconstructions are clamped back to [0, 1] and rescaled to [0, 255] for
reporting.  Checkpoints (magic ``DDCK``) store the architecture spec as
canonical JSON plus every named parameter as little-endian float64 and
round-trip bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .ndgrad import (
    ParamStore,
    Tensor,
    conv3d,
    deconv3d,
    flatten,
    maxpool3d,
    maxunpool3d,
    relu,
)
from .volio import Volume

DDCK_MAGIC = b"DDCK"

BYPASS_SITES = (("block2", "block3"), ("block3", "block4"))


class CheckpointError(DataError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture hyperparameters.  ``block_channels`` are the output
    channels of the four encoder blocks; spatial dims must be divisible
    by 16 (four stride-2 pools)."""

    input_dims: tuple[int, int, int]
    block_channels: tuple[int, int, int, int]
    convs_per_block: tuple[int, int, int, int] = (1, 1, 3, 3)
    kernel: int = 3
    bottleneck_channels: int = 1
    bypass_sites: tuple = BYPASS_SITES

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(
            self, "block_channels", tuple(int(c) for c in self.block_channels)
        )
        object.__setattr__(
            self, "convs_per_block", tuple(int(c) for c in self.convs_per_block)
        )
        object.__setattr__(
            self,
            "bypass_sites",
            tuple(tuple(site) for site in self.bypass_sites),
        )
        if len(self.input_dims) != 3 or any(d < 16 for d in self.input_dims):
            raise UsageError(f"bad input dims {self.input_dims}")
        if any(d % 16 != 0 for d in self.input_dims):
            raise UsageError(
                f"input dims {self.input_dims} must be divisible by 16"
            )
        if len(self.block_channels) != 4 or any(c < 1 for c in self.block_channels):
            raise UsageError(f"bad block channels {self.block_channels}")
        if len(self.convs_per_block) != 4 or any(c < 1 for c in self.convs_per_block):
            raise UsageError(f"bad convs_per_block {self.convs_per_block}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise UsageError(f"kernel must be odd and positive, got {self.kernel}")
        if self.bottleneck_channels < 1:
            raise UsageError("bottleneck_channels must be positive")
        if self.bypass_sites != BYPASS_SITES:
            raise UsageError(f"unsupported bypass wiring {self.bypass_sites}")

    @property
    def bottleneck_dims(self) -> tuple[int, int, int]:
        x, y, z = self.input_dims
        return (x // 16, y // 16, z // 16)

    @property
    def embedding_dim(self) -> int:
        bx, by, bz = self.bottleneck_dims
        return bx * by * bz * self.bottleneck_channels

    def to_json(self) -> str:
        payload = {
            "input_dims": list(self.input_dims),
            "block_channels": list(self.block_channels),
            "convs_per_block": list(self.convs_per_block),
            "kernel": self.kernel,
            "bottleneck_channels": self.bottleneck_channels,
            "bypass_sites": [list(site) for site in self.bypass_sites],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        try:
            payload = json.loads(text)
            return NetworkSpec(
                input_dims=tuple(payload["input_dims"]),
                block_channels=tuple(payload["block_channels"]),
                convs_per_block=tuple(payload["convs_per_block"]),
                kernel=int(payload["kernel"]),
                bottleneck_channels=int(payload["bottleneck_channels"]),
                bypass_sites=tuple(tuple(s) for s in payload["bypass_sites"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"bad network spec payload: {exc}") from exc


FULL_SPEC = NetworkSpec(input_dims=(80, 96, 80), block_channels=(8, 16, 32, 32))
DESK_SPEC = NetworkSpec(input_dims=(32, 32, 32), block_channels=(4, 8, 16, 16))


def _param_layout(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Name and shape of every parameter, in creation order.

    Encoder conv weights are [C_out, C_in, k, k, k]; decoder deconv
    weights are [C_in, C_out, k, k, k].  Bypass projections exist only
    where the bypassed channels differ.
    """
    k = spec.kernel
    ch = spec.block_channels
    layout: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, c_in, c_out, size):
        layout.append((f"{name}.w", (c_out, c_in, size, size, size)))
        layout.append((f"{name}.b", (c_out,)))

    def deconv(name, c_in, c_out, size):
        layout.append((f"{name}.w", (c_in, c_out, size, size, size)))
        layout.append((f"{name}.b", (c_out,)))

    c_prev = 1
    for b, (c_out, n_convs) in enumerate(zip(ch, spec.convs_per_block), start=1):
        c_in = c_prev
        for i in range(1, n_convs + 1):
            conv(f"enc.block{b}.conv{i}", c_in, c_out, k)
            c_in = c_out
        if b == 3 and ch[1] != ch[2]:
            conv("enc.bypass_a", ch[1], ch[2], 1)
        if b == 4 and ch[2] != ch[3]:
            conv("enc.bypass_b", ch[2], ch[3], 1)
        c_prev = c_out
    conv("enc.bottleneck", ch[3], spec.bottleneck_channels, 1)

    deconv("dec.bottleneck", spec.bottleneck_channels, ch[3], 1)
    for b in (4, 3, 2, 1):
        c_in = ch[b - 1]
        c_target = ch[b - 2] if b >= 2 else 1
        n_convs = spec.convs_per_block[b - 1]
        for i in range(1, n_convs + 1):
            c_out = c_in if i < n_convs else (c_target if b > 1 else 1)
            deconv(f"dec.block{b}.deconv{i}", c_in, c_out, k)
            c_in = c_out
    return layout


class Model:
    """Parameterized autoencoder over a fixed ``NetworkSpec``."""

    def __init__(self, spec: NetworkSpec, params: ParamStore):
        self.spec = spec
        self.params = params

    # -- graph construction ------------------------------------------------

    def encode_graph(self, x: Tensor) -> tuple[Tensor, list[tuple[np.ndarray, tuple]]]:
        """Encoder forward on a [1, X, Y, Z] tensor scaled to [0, 1].

        Returns the embedding tensor and the pool records (argmax indices
        plus pre-pool shape) the decoder needs for unpooling.
        """
        spec = self.spec
        p = self.params
        pools: list[tuple[np.ndarray, tuple]] = []
        h = x
        skip = None
        block_out = None
        for b in range(1, 5):
            for i in range(1, spec.convs_per_block[b - 1] + 1):
                h = relu(conv3d(h, p[f"enc.block{b}.conv{i}.w"], p[f"enc.block{b}.conv{i}.b"]))
            if b == 3:
                if "enc.bypass_a.w" in p:
                    skip = conv3d(skip, p["enc.bypass_a.w"], p["enc.bypass_a.b"])
                h = h + skip
            elif b == 4:
                if "enc.bypass_b.w" in p:
                    block_out = conv3d(block_out, p["enc.bypass_b.w"], p["enc.bypass_b.b"])
                h = h + block_out
            shape = h.shape
            h, idx = maxpool3d(h)
            pools.append((idx, shape))
            if b == 2:
                skip = h  # feeds bypass A at block 3's pre-pool output
            if b == 3:
                block_out = h  # feeds bypass B inside block 4
        z = conv3d(h, p["enc.bottleneck.w"], p["enc.bottleneck.b"])
        return flatten(z), pools

    def decode_graph(
        self, z: Tensor, pools: list[tuple[np.ndarray, tuple]] | None = None
    ) -> Tensor:
        """Decoder forward from an embedding tensor of length D_z.

        With ``pools`` from :meth:`encode_graph` the unpooling scatters to
        the encoder's argmax positions; without them each value lands at
        the low-index corner of its window.  Output is the raw [0, 1]-scale
        reconstruction [1, X, Y, Z] (unclamped).
        """
        spec = self.spec
        p = self.params
        if z.data.size != spec.embedding_dim:
            raise UsageError(
                f"embedding length {z.data.size} != {spec.embedding_dim}"
            )
        bx, by, bz = spec.bottleneck_dims
        h = z.reshape(spec.bottleneck_channels, bx, by, bz)
        h = deconv3d(h, p["dec.bottleneck.w"], p["dec.bottleneck.b"])
        if pools is None:
            pools = self._canonical_pools()
        ch = spec.block_channels
        for b in (4, 3, 2, 1):
            idx, shape = pools[b - 1]
            expected = (ch[b - 1],) + tuple(s // 2 for s in shape[1:])
            if h.shape != expected:
                raise UsageError(f"decoder shape {h.shape} != {expected}")
            h = maxunpool3d(h, idx, shape)
            n_convs = spec.convs_per_block[b - 1]
            for i in range(1, n_convs + 1):
                h = deconv3d(h, p[f"dec.block{b}.deconv{i}.w"], p[f"dec.block{b}.deconv{i}.b"])
                if not (b == 1 and i == n_convs):
                    h = relu(h)
        return h

    def forward_graph(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Shared-graph encode+decode for training."""
        z, pools = self.encode_graph(x)
        return z, self.decode_graph(z, pools)

    def _canonical_pools(self) -> list[tuple[np.ndarray, tuple]]:
        """Synthetic pool records scattering to each window's low corner."""
        spec = self.spec
        dims = spec.input_dims
        records = []
        for b in range(1, 5):
            ch = spec.block_channels[b - 1]
            shape = (ch,) + tuple(d // 2 ** (b - 1) for d in dims)
            pooled = (ch,) + tuple(s // 2 for s in shape[1:])
            ci, xi, yi, zi = np.indices(pooled, sparse=True)
            idx = np.ravel_multi_index(
                (ci, 2 * xi, 2 * yi, 2 * zi), shape
            ).astype(np.int64)
            records.append((idx, shape))
        return records

    # -- volume-level API --------------------------------------------------

    def input_tensor(self, volume: Volume) -> Tensor:
        """[1, X, Y, Z] network input on the [0, 1] scale."""
        if volume.dims != self.spec.input_dims:
            raise UsageError(
                f"volume dims {volume.dims} != spec {self.spec.input_dims}"
            )
        scaled = volume.voxels.astype(np.float64) / 255.0
        return Tensor(scaled[None, :, :, :])

    def _report_volume(self, raw: Tensor) -> Volume:
        clamped = np.clip(raw.data[0], 0.0, 1.0) * 255.0
        return Volume(clamped.astype(np.float32))

    def encode(self, volume: Volume) -> np.ndarray:
        """Embedding of a [0, 255] volume as a float64 vector of length D_z."""
        z, _ = self.encode_graph(self.input_tensor(volume))
        return z.data.copy()

    def decode(self, z: np.ndarray) -> Volume:
        """Reconstruction from an embedding, reported on the [0, 255] scale."""
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        raw = self.decode_graph(Tensor(z))
        return self._report_volume(raw)

    def forward(self, volume: Volume) -> tuple[np.ndarray, Volume]:
        """Encode then decode with shared pooling indices."""
        z, raw = self.forward_graph(self.input_tensor(volume))
        return z.data.copy(), self._report_volume(raw)

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.params.items())


def build(spec: NetworkSpec, init_seed: int) -> Model:
    """Construct a model with deterministic He-style initialization.

    Conv and deconv weights draw from N(0, sqrt(2 / fan_in)) with
    fan_in = in_channels * kernel^3; biases start at zero.  The draw
    order is the parameter creation order, so one seed fixes every
    initial value.
    """
    rng = np.random.Generator(np.random.PCG64(init_seed))
    params = ParamStore()
    for name, shape in _param_layout(spec):
        if name.endswith(".b"):
            params.add(name, np.zeros(shape))
            continue
        if name.startswith("enc."):
            fan_in = shape[1] * shape[2] * shape[3] * shape[4]
        else:
            fan_in = shape[0] * shape[2] * shape[3] * shape[4]
        std = np.sqrt(2.0 / fan_in)
        params.add(name, rng.normal(0.0, std, size=shape))
    return Model(spec, params)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_model(model: Model, path) -> None:
    """Write a DDCK checkpoint: spec JSON plus named float64 parameters."""
    spec_blob = model.spec.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DDCK_MAGIC)
        fh.write(struct.pack("<I", len(spec_blob)))
        fh.write(spec_blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(tensor.data.astype("<f8", copy=False).tobytes())


def load_model(path) -> Model:
    """Read a DDCK checkpoint back into a model, bit-exact."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != DDCK_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (spec_len,) = struct.unpack("<I", take(4, "spec length"))
    spec = NetworkSpec.from_json(bytes(take(spec_len, "spec")).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size, f"parameter {name!r}"), dtype="<f8")
        state[name] = arr.reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")

    expected = _param_layout(spec)
    if [n for n, _ in expected] != list(state):
        raise CheckpointError(f"{path}: parameter names do not match spec")
    for name, shape in expected:
        if state[name].shape != shape:
            raise CheckpointError(
                f"{path}: {name!r} has shape {state[name].shape}, expected {shape}"
            )
    params = ParamStore()
    for name, shape in expected:
        params.add(name, state[name])
    return Model(spec, params)

"""The VIKC checkpoint format.

All integers are little-endian::

    magic      4 bytes   b"VIKC"
    version    u32
    digest     32 bytes  SHA-256 of the canonical model-config JSON
    header_len u32
    header     canonical JSON {"config", "meta", "optim", "rng"}
    n_tensors  u32
    n_tensors x { name_len u16, name utf-8, ndim u8, dims u32 x ndim, offset u64 }
    payload    float32 little-endian, tensors in name order, offsets relative to payload start

Tensor names are ``param/<name>``, ``optim.m/<name>`` and ``optim.v/<name>``.
Serialization is canonical, so save -> load -> save reproduces the file byte for byte.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import BackboneConfig
from .errors import ConfigError, FormatError
from .optim import OptimState
from .storage import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"VIKC"
VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")

PARAM, OPTIM_M, OPTIM_V = "param/", "optim.m/", "optim.v/"


@dataclass
class Checkpoint:
    config: BackboneConfig
    params: dict[str, np.ndarray]
    optim: OptimState | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def build_model(self):
        from .backbone import Backbone

        model = Backbone(self.config, np.random.default_rng(0))
        model.set_parameters(self.params)
        return model


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {PARAM + name: value for name, value in ckpt.params.items()}
    if ckpt.optim is not None:
        out.update({OPTIM_M + name: value for name, value in ckpt.optim.m.items()})
        out.update({OPTIM_V + name: value for name, value in ckpt.optim.v.items()})
    return out


def encode(ckpt: Checkpoint) -> bytes:
    header = _canonical({
        "config": ckpt.config.model_dump(mode="json"),
        "meta": ckpt.meta,
        "optim": ckpt.optim.hyperparams() if ckpt.optim is not None else None,
        "rng": ckpt.rng_state,
    })
    tensors = _tensors(ckpt)
    table = [struct.pack("<I", len(tensors))]
    payload = []
    offset = 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype=PAYLOAD_DTYPE)
        raw = name.encode("utf-8")
        table.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim))
        table.append(struct.pack(f"<{data.ndim}I", *data.shape) + struct.pack("<Q", offset))
        payload.append(data.tobytes())
        offset += data.nbytes
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        ckpt.config.digest(),
        struct.pack("<I", len(header)),
        header,
        *table,
        *payload,
    ])


def checkpoint_save(ckpt: Checkpoint, path: Path) -> None:
    atomic_write_bytes(Path(path), encode(ckpt))
    logger.info("💾 checkpoint %s (%d tensors)", path, len(_tensors(ckpt)))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated at byte {self.pos}, needed {n} more of {len(self.data)}", module="checkpoint"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes, path: Path = Path("<bytes>"), *, expected: BackboneConfig | None = None,
           allow_digest_mismatch: bool = False) -> Checkpoint:
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}", module="checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: format version {version}, this build reads {VERSION}", module="checkpoint")
    digest = r.take(32)
    (header_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(header_len))
        config = BackboneConfig.model_validate(header["config"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}", module="checkpoint") from exc
    want = (expected or config).digest()
    if digest != want or (expected is not None and expected.digest() != config.digest()):
        message = f"{path}: config digest {digest.hex()[:12]} does not match {want.hex()[:12]}"
        if not allow_digest_mismatch:
            raise ConfigError(message, module="checkpoint")
        logger.warning("%s (loading anyway)", message)

    (n_tensors,) = r.unpack("<I")
    index = []
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (offset,) = r.unpack("<Q")
        index.append((name, tuple(shape), offset))
    base = r.pos
    tensors = {}
    for name, shape, offset in index:
        count = int(np.prod(shape, dtype=np.int64))
        start = base + offset
        end = start + count * PAYLOAD_DTYPE.itemsize
        if end > len(data):
            raise FormatError(f"{path}: tensor {name} runs past end of file", module="checkpoint")
        tensors[name] = np.frombuffer(data, dtype=PAYLOAD_DTYPE, count=count, offset=start).reshape(shape).astype(np.float32)

    params = {k[len(PARAM):]: v for k, v in tensors.items() if k.startswith(PARAM)}
    optim = None
    if header.get("optim") is not None:
        hyper = dict(header["optim"])
        hyper["betas"] = tuple(hyper["betas"])
        optim = OptimState(**hyper)
        optim.m = {k[len(OPTIM_M):]: v for k, v in tensors.items() if k.startswith(OPTIM_M)}
        optim.v = {k[len(OPTIM_V):]: v for k, v in tensors.items() if k.startswith(OPTIM_V)}
    return Checkpoint(config=config, params=params, optim=optim, rng_state=header.get("rng"), meta=header.get("meta") or {})


def checkpoint_load(path: Path, *, expected: BackboneConfig | None = None,
                    allow_digest_mismatch: bool = False) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}", module="checkpoint")
    return decode(path.read_bytes(), path, expected=expected, allow_digest_mismatch=allow_digest_mismatch)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

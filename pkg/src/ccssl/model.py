"""Shared MLP encoder with classification and projection heads."""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError

CHECKPOINT_MAGIC = b"CCSSLCK1"


@dataclass
class ModelParams:
    """Named parameter tensors plus the input shape they were built for."""

    tensors: dict
    input_shape: tuple

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    @property
    def num_classes(self):
        return self.tensors["cls.w"].shape[1]

    @property
    def embed_dim(self):
        return self.tensors["proj.w2"].shape[1]

    def arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ModelParams({k: ad.Tensor(v.data.copy(), requires_grad=True)
                            for k, v in self.tensors.items()}, self.input_shape)

    @classmethod
    def from_arrays(cls, arrays, input_shape):
        return cls({k: ad.Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()},
                   tuple(input_shape))


def _he_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(input_shape, num_classes, rng, hidden=128, rep_dim=128, proj_hidden=128,
                embed_dim=64):
    """He-uniform weights, zero biases."""
    d_in = int(np.prod(input_shape))
    layers = [
        ("enc.w1", "enc.b1", d_in, hidden),
        ("enc.w2", "enc.b2", hidden, rep_dim),
        ("cls.w", "cls.b", rep_dim, num_classes),
        ("proj.w1", "proj.b1", rep_dim, proj_hidden),
        ("proj.w2", "proj.b2", proj_hidden, embed_dim),
    ]
    tensors = {}
    for w, b, fan_in, fan_out in layers:
        tensors[w] = ad.Tensor(_he_uniform(rng, fan_in, fan_out), requires_grad=True)
        tensors[b] = ad.Tensor(np.zeros(fan_out), requires_grad=True)
    return ModelParams(tensors, tuple(input_shape))


def _flatten(params, images):
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != tuple(params.input_shape):
        raise DimensionError(f"images of shape {images.shape[1:]} do not match encoder "
                             f"input {tuple(params.input_shape)}")
    return ad.Tensor(images.reshape(len(images), -1))


def encode(params, images):
    """Representation r = relu(relu(x W1 + b1) W2 + b2)."""
    x = images if isinstance(images, ad.Tensor) else _flatten(params, images)
    h = ad.relu(x @ params["enc.w1"] + params["enc.b1"])
    return ad.relu(h @ params["enc.w2"] + params["enc.b2"])


def logits(params, r):
    return r @ params["cls.w"] + params["cls.b"]


def classify(params, r):
    return ad.row_softmax(logits(params, r))


def project(params, r):
    """Unit-norm embedding from the two-layer projection head."""
    h = ad.relu(r @ params["proj.w1"] + params["proj.b1"])
    return ad.l2_normalize_rows(h @ params["proj.w2"] + params["proj.b2"])


def predict(params, images, batch_size=1024):
    """Class probabilities without building a graph."""
    out = []
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            out.append(classify(params, encode(params, images[lo:lo + batch_size])).data)
    if not out:
        return np.zeros((0, params.num_classes))
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# checkpoints
#
# layout: magic, u64 manifest length, manifest JSON (utf-8), then for each
# tensor in manifest order a u64 element count followed by little-endian
# float64 values.


def save_checkpoint(path, params, extra=None):
    manifest = {
        "input_shape": list(params.input_shape),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    if extra:
        manifest["extra"] = extra
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for t in params.tensors.values():
            fh.write(struct.pack("<Q", t.size))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(ModelParams, manifest)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + hlen
    manifest = json.loads(raw[16:pos].decode("utf-8"))
    arrays = {}
    for entry in manifest["tensors"]:
        if pos + 8 > len(raw):
            raise FormatError(f"{path}: truncated at byte offset {pos}")
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if count != expected:
            raise FormatError(f"{path}: tensor {entry['name']} has {count} values, "
                              f"manifest shape {entry['shape']}")
        end = pos + 8 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated at byte offset {pos}")
        arrays[entry["name"]] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(entry["shape"]).copy()
        pos = end
    return ModelParams.from_arrays(arrays, manifest["input_shape"]), manifest


def check_same_shapes(a, b):
    """Raise unless two name->array mappings agree on names and shapes."""
    if list(a) != list(b):
        raise ContractError(f"parameter names differ: {list(a)} vs {list(b)}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ContractError(f"{k}: shape {np.shape(a[k])} vs {np.shape(b[k])}")

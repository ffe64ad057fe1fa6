"""Model container and on-disk persistence.

A Model is a list of convolution layer records (dense or CSR storage, with
optional codebook and activation-quantization metadata) followed by fully
connected layers. Persistence is a directory holding a JSON manifest plus one
little-endian binary blob per array, each with a 64-byte header and an FNV-1a
64-bit checksum recorded in the manifest. See docs/format.md for the exact
layout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .csr import CsrKernel, analyze_sparsity, build_csr, decompress
from .dense import ConvLayerDense, conv_dense_direct, conv_dense_gemm
from .engine import EnginePlan, conv_sparse
from .errors import FormatError, ShapeError
from .quantize import Codebook, fake_quant_activation
from .shapes import ConvShape

FORMAT_VERSION = 1
_MAGIC = b"SCBLOB01"
_HEADER_SIZE = 64
_MAX_DIMS = 4

_DTYPE_TAGS = {
    "f32": np.dtype("<f4"),
    "f16": np.dtype("<f2"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_TAG_FOR_DTYPE = {np.dtype(d).str.lstrip("<>|="): t
                  for t, d in _DTYPE_TAGS.items()}


# ---------------------------------------------------------------------------
# checksums and blobs
# ---------------------------------------------------------------------------

def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash (corruption detection, not security)."""
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _dtype_tag(arr: np.ndarray) -> str:
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _TAG_FOR_DTYPE:
        raise FormatError(f"unserializable dtype {arr.dtype}")
    return _TAG_FOR_DTYPE[key]


def write_blob(path: Path, arr: np.ndarray, packed_codes: bool = False) -> dict:
    """Write one array blob; returns its manifest entry (tag, shape, checksum).

    packed_codes stores small non-negative integers two-per-byte (nibble
    packing, low nibble first), tagged 'u8-packed-codes'.
    """
    if arr.ndim > _MAX_DIMS:
        raise FormatError(f"arrays above {_MAX_DIMS} dimensions are not supported")
    shape = arr.shape
    if packed_codes:
        flat = np.asarray(arr, dtype=np.uint8).ravel()
        if flat.size and flat.max() > 15:
            raise FormatError("packed codes require values in [0, 15]")
        if flat.size % 2:
            flat = np.concatenate([flat, np.zeros(1, np.uint8)])
        data = (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)
        tag = "u8-packed-codes"
        payload = data.tobytes()
    else:
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    header = bytearray(_HEADER_SIZE)
    header[0:8] = _MAGIC
    header[8:16] = tag.encode()[:8].ljust(8, b"\0")
    header[16:24] = np.int64(len(shape)).tobytes()
    for i, d in enumerate(shape):
        header[24 + 8 * i:32 + 8 * i] = np.int64(d).tobytes()
    blob = bytes(header) + payload
    path.write_bytes(blob)
    return {"file": path.name, "dtype": tag, "shape": list(shape),
            "checksum": f"{fnv1a64(blob):016x}"}


def read_blob(path: Path, entry: dict) -> np.ndarray:
    blob = path.read_bytes()
    if f"{fnv1a64(blob):016x}" != entry["checksum"]:
        raise FormatError(f"checksum mismatch for {path.name}")
    if blob[:8] != _MAGIC:
        raise FormatError(f"{path.name}: bad blob magic")
    header_tag = blob[8:16].rstrip(b"\0").decode()
    tag = entry["dtype"]
    # the 8-byte header field holds a truncated copy of the manifest tag
    if header_tag != tag[:8]:
        raise FormatError(f"{path.name}: dtype tag disagrees with manifest")
    shape = tuple(entry["shape"])
    payload = blob[_HEADER_SIZE:]
    if tag == "u8-packed-codes":
        packed = np.frombuffer(payload, dtype=np.uint8)
        flat = np.empty(packed.size * 2, dtype=np.uint8)
        flat[0::2] = packed & 0x0F
        flat[1::2] = packed >> 4
        n = int(np.prod(shape)) if shape else 1
        return flat[:n].reshape(shape).astype(np.int64)
    dtype = _DTYPE_TAGS.get(tag)
    if dtype is None:
        raise FormatError(f"{path.name}: unknown dtype tag {tag!r}")
    arr = np.frombuffer(payload, dtype=dtype)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise FormatError(f"{path.name}: payload size disagrees with shape")
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# layer records
# ---------------------------------------------------------------------------

@dataclass
class ConvLayerRecord:
    """One convolution layer: dense KCRS weights or a CSR kernel, plus bias
    and optional quantization metadata."""

    name: str
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: str = "relu"          # "relu" | "none"
    weights: np.ndarray | None = None  # KCRS when storage == "dense"
    kernel: CsrKernel | None = None    # when storage == "csr"
    codebook: Codebook | None = None
    act_quant: dict | None = None

    @property
    def storage(self) -> str:
        return "csr" if self.kernel is not None else "dense"

    def weight_values(self) -> np.ndarray:
        return self.kernel.values if self.kernel is not None else self.weights

    def set_weight_values(self, arr: np.ndarray) -> None:
        if self.kernel is not None:
            if arr.shape != self.kernel.values.shape:
                raise ShapeError(f"{self.name}: value array shape changed")
            self.kernel.values = np.asarray(arr)
        else:
            if arr.shape != self.weights.shape:
                raise ShapeError(f"{self.name}: weight shape changed")
            self.weights = np.asarray(arr)

    def dense_weights(self) -> np.ndarray:
        return decompress(self.kernel) if self.kernel is not None else self.weights

    def out_channels(self) -> int:
        return len(self.bias)

    def sparsity(self) -> float:
        w = self.dense_weights()
        return float(np.mean(w == 0))

    def conv_shape(self, x: np.ndarray) -> ConvShape:
        k, c, r, s = self.dense_weights().shape if self.kernel is None \
            else (self.kernel.shape.k, self.kernel.shape.c,
                  self.kernel.shape.r, self.kernel.shape.s)
        return ConvShape(n=x.shape[0], c=x.shape[1], h=x.shape[2], w=x.shape[3],
                         k=k, r=r, s=s, stride=self.stride, padding=self.padding)

    def csr_kernel(self, x: np.ndarray, unify: bool = True) -> CsrKernel:
        """CSR form for this input geometry (built on demand for dense layers)."""
        if self.kernel is not None:
            return self.kernel
        return build_csr(self.weights, self.conv_shape(x), unify=unify)


@dataclass
class DenseLayerRecord:
    """Fully connected layer: weights (out, in) and bias."""

    name: str
    weights: np.ndarray
    bias: np.ndarray
    codebook: Codebook | None = None

    def weight_values(self) -> np.ndarray:
        return self.weights

    def set_weight_values(self, arr: np.ndarray) -> None:
        if arr.shape != self.weights.shape:
            raise ShapeError(f"{self.name}: weight shape changed")
        self.weights = np.asarray(arr)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model:
    """Sequential conv(+ReLU) stack, global average pool, fully connected
    head. Covers the networks this toolkit trains and benchmarks."""

    def __init__(self, conv_layers=None, dense_layers=None, meta=None):
        self.conv_layers: list[ConvLayerRecord] = list(conv_layers or [])
        self.dense_layers: list[DenseLayerRecord] = list(dense_layers or [])
        self.meta: dict = dict(meta or {})

    def all_layers(self):
        return [*self.conv_layers, *self.dense_layers]

    @classmethod
    def from_toynet(cls, net, meta=None) -> "Model":
        convs = []
        for i in range(len(net.conv_channels)):
            w = net.params[f"conv{i}.w"]
            convs.append(ConvLayerRecord(
                name=f"conv{i}", weights=w.copy(), bias=net.params[f"conv{i}.b"].copy(),
                stride=1, padding=net.kernel_size // 2, activation="relu"))
        dense = [DenseLayerRecord(name="fc", weights=net.params["fc.w"].copy(),
                                  bias=net.params["fc.b"].copy())]
        m = dict(meta or {})
        m.setdefault("architecture", {
            "in_channels": net.in_channels, "image_size": net.image_size,
            "conv_channels": list(net.conv_channels),
            "kernel_size": net.kernel_size, "num_classes": net.num_classes,
        })
        return cls(convs, dense, m)

    # ---- conversion -------------------------------------------------------

    def build_csr_all(self, unify: bool = True, sample_input=None) -> dict:
        """Switch every conv layer to CSR storage; returns per-layer
        SparsityReports. Input geometry comes from the recorded architecture
        or a sample input batch."""
        reports = {}
        x = sample_input if sample_input is not None else self._probe_input()
        for layer in self.conv_layers:
            reports[layer.name] = analyze_sparsity(layer.dense_weights())
            if layer.kernel is None:
                layer.kernel = build_csr(layer.weights, layer.conv_shape(x), unify=unify)
                layer.weights = None
            shape = layer.conv_shape(x)
            x = np.zeros((1, shape.k, shape.e, shape.f), dtype=np.float32)
        return reports

    def _probe_input(self) -> np.ndarray:
        arch = self.meta.get("architecture")
        if arch is None:
            raise ShapeError("model has no recorded input geometry; pass sample_input")
        return np.zeros((1, arch["in_channels"], arch["image_size"],
                         arch["image_size"]), dtype=np.float32)

    # ---- inference --------------------------------------------------------

    def forward(self, x: np.ndarray, config=None) -> np.ndarray:
        """Run the network. `config` maps layer name -> {"algorithm", and
        optionally "sub_batch_size"/"worker_count"}; unconfigured layers use
        their storage's natural algorithm (dense-gemm or sparse-direct)."""
        choices = getattr(config, "choices", config) or {}
        a = np.asarray(x)
        for layer in self.conv_layers:
            entry = choices.get(layer.name, {})
            algo = entry.get("algorithm",
                             "sparse-direct" if layer.kernel is not None else "dense-gemm")
            if algo == "sparse-direct":
                plan = EnginePlan(sub_batch_size=entry.get("sub_batch_size", 1),
                                  worker_count=entry.get("worker_count", 1))
                z = conv_sparse(a, layer.csr_kernel(a), layer.bias, plan)
            elif algo in ("dense-direct", "dense-gemm"):
                dl = ConvLayerDense(weights=layer.dense_weights(), bias=layer.bias,
                                    stride=layer.stride, padding=layer.padding)
                fn = conv_dense_direct if algo == "dense-direct" else conv_dense_gemm
                z = fn(a, dl)
            else:
                raise ShapeError(f"unknown algorithm {algo!r} for layer {layer.name}")
            a = np.maximum(z, 0) if layer.activation == "relu" else z
            if layer.act_quant is not None:
                a = fake_quant_activation(a, layer.act_quant)
        a = a.mean(axis=(2, 3))
        for i, layer in enumerate(self.dense_layers):
            a = a @ layer.weights.T + layer.bias
            if i < len(self.dense_layers) - 1:
                a = np.maximum(a, 0)
        return a

    def predict(self, x, config=None) -> np.ndarray:
        return np.argmax(self.forward(x, config), axis=1)

    def accuracy(self, x, y, config=None) -> float:
        return float(np.mean(self.predict(x, config) == np.asarray(y)))

    def collect_activations(self, x) -> dict:
        """Post-ReLU conv outputs per layer (for activation calibration),
        computed without activation fake-quantization."""
        acts = {}
        a = np.asarray(x)
        for layer in self.conv_layers:
            dl = ConvLayerDense(weights=layer.dense_weights(), bias=layer.bias,
                                stride=layer.stride, padding=layer.padding)
            z = conv_dense_gemm(a, dl)
            a = np.maximum(z, 0) if layer.activation == "relu" else z
            acts[layer.name] = a
        return acts


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def _shape_dict(sh: ConvShape) -> dict:
    return {"n": sh.n, "c": sh.c, "h": sh.h, "w": sh.w, "k": sh.k,
            "r": sh.r, "s": sh.s, "stride": sh.stride, "padding": sh.padding}


def save_model(model: Model, path) -> None:
    """Write the model as a manifest + blob directory (overwrites entries)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layers = []
    blobs = {}

    def put(key: str, arr: np.ndarray, packed: bool = False) -> str:
        blobs[key] = write_blob(path / f"{key}.bin", arr, packed_codes=packed)
        return key

    for layer in model.conv_layers:
        rec = {"name": layer.name, "type": "conv", "storage": layer.storage,
               "stride": layer.stride, "padding": layer.padding,
               "activation": layer.activation,
               "bias": put(f"{layer.name}.bias", layer.bias),
               "sparsity": layer.sparsity(), "act_quant": layer.act_quant}
        if layer.kernel is not None:
            kern = layer.kernel
            rec["conv_shape"] = _shape_dict(kern.shape)
            rec["sparse_level"] = kern.sparse_level
            rec["unified"] = kern.unified
            rec["values"] = put(f"{layer.name}.values", kern.values)
            rec["colidx"] = put(f"{layer.name}.colidx", kern.colidx.astype(np.int32))
            rec["rowptr"] = put(f"{layer.name}.rowptr", kern.rowptr.astype(np.int32))
        else:
            rec["weights"] = put(f"{layer.name}.weights", layer.weights)
        if layer.codebook is not None:
            cb = layer.codebook
            rec["codebook"] = {
                "centroids": put(f"{layer.name}.centroids", cb.centroids),
                "assignments": put(f"{layer.name}.codes",
                                   cb.assignments, packed=cb.n_centroids <= 16),
            }
        layers.append(rec)
    for layer in model.dense_layers:
        rec = {"name": layer.name, "type": "dense",
               "weights": put(f"{layer.name}.weights", layer.weights),
               "bias": put(f"{layer.name}.bias", layer.bias)}
        if layer.codebook is not None:
            cb = layer.codebook
            rec["codebook"] = {
                "centroids": put(f"{layer.name}.centroids", cb.centroids),
                "assignments": put(f"{layer.name}.codes",
                                   cb.assignments, packed=cb.n_centroids <= 16),
            }
        layers.append(rec)
    manifest = {"format_version": FORMAT_VERSION, "layers": layers,
                "blobs": blobs, "meta": model.meta}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_model(path) -> Model:
    """Inverse of save_model; verifies checksums and re-validates every CSR
    kernel before the model is usable."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{path} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version!r} "
                          f"(this build reads version {FORMAT_VERSION})")
    blobs = manifest["blobs"]

    def get(key: str) -> np.ndarray:
        if key not in blobs:
            raise FormatError(f"manifest references missing blob entry {key!r}")
        entry = blobs[key]
        blob_path = path / entry["file"]
        if not blob_path.exists():
            raise FormatError(f"missing blob file {entry['file']}")
        return read_blob(blob_path, entry)

    def get_codebook(rec):
        if "codebook" not in rec:
            return None
        cents = get(rec["codebook"]["centroids"]).astype(np.float16)
        codes = get(rec["codebook"]["assignments"]).astype(np.int64)
        return Codebook(centroids=cents, assignments=codes)

    convs, denses = [], []
    for rec in manifest["layers"]:
        if rec["type"] == "conv":
            layer = ConvLayerRecord(
                name=rec["name"], bias=get(rec["bias"]), stride=rec["stride"],
                padding=rec["padding"], activation=rec["activation"],
                act_quant=rec.get("act_quant"))
            if rec["storage"] == "csr":
                sh = ConvShape(**rec["conv_shape"])
                kern = CsrKernel(values=get(rec["values"]),
                                 colidx=get(rec["colidx"]).astype(np.int32),
                                 rowptr=get(rec["rowptr"]).astype(np.int32),
                                 sparse_level=rec["sparse_level"], shape=sh,
                                 unified=rec["unified"])
                kern.validate()
                layer.kernel = kern
            elif rec["storage"] == "dense":
                layer.weights = get(rec["weights"])
            else:
                raise FormatError(f"unknown storage {rec['storage']!r}")
            layer.codebook = get_codebook(rec)
            convs.append(layer)
        elif rec["type"] == "dense":
            layer = DenseLayerRecord(name=rec["name"], weights=get(rec["weights"]),
                                     bias=get(rec["bias"]))
            layer.codebook = get_codebook(rec)
            denses.append(layer)
        else:
            raise FormatError(f"unknown layer type {rec['type']!r}")
    return Model(convs, denses, manifest.get("meta", {}))

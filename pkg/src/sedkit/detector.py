"""Small pyramid anchor detector on top of the :mod:`sedkit.autograd` tape.

Architecture (defaults): two stride-2 stem convolutions reach stride 4,
two further stride-2 convolutions give strides 8 and 16. Every level is
projected to a common width by a 1x1 lateral conv, then a shared head
(3x3 conv + ReLU, followed by 1x1 classification and 1x1 regression
convs) runs on each level. One square anchor of side
``anchor_base * stride`` sits at every grid cell.

The classifier emits ``C + 1`` logits per anchor; index ``C`` (the last)
is background.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sedkit import autograd as ag
from sedkit.autograd import Tensor
from sedkit.geometry import Detection, Box, decode_boxes, encode_boxes, iou_matrix, nms_indices

IGNORE = -1


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 3
    stem_channels: tuple = (8, 16)
    stem_kernels: tuple = (3, 3)  # stride-2 stem convs; even sizes tile without overlap
    level_channels: tuple = (16, 32, 32)
    head_channels: int = 16
    anchor_base: float = 4.0
    first_level: int = 2          # stride 2**first_level after the stem
    cls_prior: float = 0.02       # initial foreground probability

    @property
    def num_levels(self) -> int:
        return len(self.level_channels)

    @property
    def strides(self) -> tuple:
        return tuple(2 ** (self.first_level + i) for i in range(self.num_levels))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Level:
    index: int           # position in the layout
    f: int               # stride == 2**f
    stride: int
    height: int
    width: int
    anchor_side: float


@dataclass(frozen=True)
class AnchorLayout:
    levels: tuple
    image_height: int
    image_width: int
    anchors_per_cell: int = 1

    @property
    def num_anchors(self) -> int:
        return sum(l.height * l.width * self.anchors_per_cell for l in self.levels)

    def level_anchors(self, i: int) -> np.ndarray:
        lv = self.levels[i]
        cy = (np.arange(lv.height) + 0.5) * lv.stride
        cx = (np.arange(lv.width) + 0.5) * lv.stride
        yy, xx = np.meshgrid(cy, cx, indexing="ij")
        h = lv.anchor_side / 2
        return np.stack([xx - h, yy - h, xx + h, yy + h], axis=-1).reshape(lv.height, lv.width, 1, 4)

    def all_anchors(self) -> np.ndarray:
        return np.concatenate([self.level_anchors(i).reshape(-1, 4) for i in range(len(self.levels))])


def make_layout(arch: ArchConfig, height: int, width: int) -> AnchorLayout:
    top = arch.strides[-1]
    if height % top or width % top:
        raise ValueError(f"image {height}x{width} not divisible by the largest stride {top}")
    levels = tuple(
        Level(i, arch.first_level + i, s, height // s, width // s, arch.anchor_base * s)
        for i, s in enumerate(arch.strides)
    )
    return AnchorLayout(levels, height, width)


def _layer_shapes(arch: ArchConfig) -> dict:
    shapes = {}
    cin = 3
    if len(arch.stem_kernels) != len(arch.stem_channels):
        raise ValueError("stem_kernels and stem_channels differ in length")
    for i, (c, k) in enumerate(zip(arch.stem_channels, arch.stem_kernels)):
        if k not in (2, 3):
            raise ValueError(f"stem kernel must be 2 or 3, got {k}")
        shapes[f"stem{i}"] = (k, k, cin, c)
        cin = c
    if arch.level_channels[0] != cin:
        raise ValueError("level_channels[0] must equal the last stem width")
    for i in range(1, arch.num_levels):
        shapes[f"down{i}"] = (3, 3, arch.level_channels[i - 1], arch.level_channels[i])
    for i, c in enumerate(arch.level_channels):
        shapes[f"lat{i}"] = (1, 1, c, arch.head_channels)
    shapes["head"] = (3, 3, arch.head_channels, arch.head_channels)
    shapes["cls"] = (1, 1, arch.head_channels, arch.num_classes + 1)
    shapes["reg"] = (1, 1, arch.head_channels, 4)
    return shapes


def param_count(arch: ArchConfig) -> int:
    return sum(int(np.prod(s)) + s[-1] for s in _layer_shapes(arch).values())


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> dict:
    """Fan-in scaled uniform initialization; biases zero except the class prior."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(arch).items():
        fan_in = shape[0] * shape[1] * shape[2]
        gain = 0.1 if name in ("cls", "reg") else 1.0
        bound = gain * np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[f"{name}.b"] = np.zeros(shape[-1], dtype=dtype)
    bg = np.log((1 - arch.cls_prior) * arch.num_classes / arch.cls_prior)
    params["cls.b"][-1] = bg
    return params


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def bind(params: dict, requires_grad: bool = True) -> dict:
    """Wrap parameter arrays as tape leaves."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


@dataclass
class LevelOutput:
    logits: Tensor      # (B, H, W, A, C+1)
    deltas: Tensor      # (B, H, W, A, 4)

    @property
    def class_probs(self) -> np.ndarray:
        z = self.logits.data
        e = np.exp(z - ag.last_max(z, keepdims=True))
        return e / ag.last_sum(e, keepdims=True)


@dataclass
class PyramidOutput:
    levels: list
    layout: AnchorLayout

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> LevelOutput:
        return self.levels[i]


def forward(params, images, arch: ArchConfig) -> PyramidOutput:
    """Run the detector on a (B, H, W, 3) or (H, W, 3) batch.

    ``params`` may be raw arrays (inference) or tape leaves from :func:`bind`.
    """
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    dtype = p["head.w"].dtype
    layout = make_layout(arch, images.shape[1], images.shape[2])
    x = Tensor(np.ascontiguousarray(images, dtype=dtype))
    for i, k in enumerate(arch.stem_kernels):
        x = ag.relu(ag.conv2d(x, p[f"stem{i}.w"], p[f"stem{i}.b"], stride=2, pad=k - 2))
    feats = [x]
    for i in range(1, arch.num_levels):
        x = ag.relu(ag.conv2d(x, p[f"down{i}.w"], p[f"down{i}.b"], stride=2, pad=1))
        feats.append(x)
    levels = []
    k = arch.num_classes + 1
    for i, feat in enumerate(feats):
        h = ag.relu(ag.conv2d(feat, p[f"lat{i}.w"], p[f"lat{i}.b"]))
        h = ag.relu(ag.conv2d(h, p["head.w"], p["head.b"], pad=1))
        logits = ag.conv2d(h, p["cls.w"], p["cls.b"])
        deltas = ag.conv2d(h, p["reg.w"], p["reg.b"])
        b, hh, ww, _ = logits.shape
        levels.append(LevelOutput(logits.reshape(b, hh, ww, 1, k), deltas.reshape(b, hh, ww, 1, 4)))
    return PyramidOutput(levels, layout)


def backward(loss: Tensor, leaves: dict, component: str = "loss") -> dict:
    """Gradients of a scalar ``loss`` w.r.t. the tape leaves from :func:`bind`."""
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {component}: {value}")
    for t in leaves.values():
        t.grad = None
    ag.backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


@dataclass
class AssignmentMap:
    labels: list         # per level (H, W, A) int: class id, C for background, IGNORE
    boxes: list          # per level (H, W, A, 4) matched gt (zeros where not foreground)
    num_classes: int

    def flat_labels(self) -> np.ndarray:
        return np.concatenate([l.reshape(-1) for l in self.labels])

    def foreground(self) -> np.ndarray:
        lab = self.flat_labels()
        return (lab >= 0) & (lab < self.num_classes)


def assign_targets(layout: AnchorLayout, gt_boxes, gt_labels, num_classes: int,
                   fg_thr: float = 0.5, bg_thr: float = 0.4) -> AssignmentMap:
    """IoU-threshold anchor labelling with forced best-anchor matches."""
    if not 0.0 <= bg_thr <= fg_thr <= 1.0:
        raise ValueError("need 0 <= bg_thr <= fg_thr <= 1")
    anchors = layout.all_anchors()
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    labels = np.full(n, num_classes, dtype=np.int64)
    matched = np.zeros((n, 4))
    if len(gt_boxes):
        ious = iou_matrix(anchors, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best = ious[np.arange(n), best_gt]
        labels[(best >= bg_thr) & (best < fg_thr)] = IGNORE
        fg = best >= fg_thr
        labels[fg] = gt_labels[best_gt[fg]]
        matched[fg] = gt_boxes[best_gt[fg]]
        for g in range(len(gt_boxes)):
            a = int(ious[:, g].argmax())
            labels[a] = gt_labels[g]
            matched[a] = gt_boxes[g]
    out_l, out_b, start = [], [], 0
    for lv in layout.levels:
        cnt = lv.height * lv.width * layout.anchors_per_cell
        out_l.append(labels[start:start + cnt].reshape(lv.height, lv.width, layout.anchors_per_cell))
        out_b.append(matched[start:start + cnt].reshape(lv.height, lv.width, layout.anchors_per_cell, 4))
        start += cnt
    return AssignmentMap(out_l, out_b, num_classes)


def stack_assignments(maps: list) -> AssignmentMap:
    """Batch per-image assignment maps along a new leading axis."""
    return AssignmentMap(
        [np.stack([m.labels[i] for m in maps]) for i in range(len(maps[0].labels))],
        [np.stack([m.boxes[i] for m in maps]) for i in range(len(maps[0].boxes))],
        maps[0].num_classes,
    )


def regression_targets(assign: AssignmentMap, layout: AnchorLayout) -> list:
    """Encoded gt deltas per level (zeros at non-foreground anchors)."""
    out = []
    for i, (lab, boxes) in enumerate(zip(assign.labels, assign.boxes)):
        anchors = np.broadcast_to(layout.level_anchors(i), boxes.shape)
        fg = (lab >= 0) & (lab < assign.num_classes)
        t = np.zeros(boxes.shape)
        if fg.any():
            t[fg] = encode_boxes(boxes[fg], anchors[fg])
        out.append(t)
    return out


def detections_from_arrays(probs: list, deltas: list, layout: AnchorLayout,
                           score_thr: float, nms_thr: float, max_dets: int = 100,
                           pre_nms: int = 1000) -> list:
    """Decode one image's per-level probabilities/deltas into detections.

    ``probs[i]`` is (H, W, A, C+1), ``deltas[i]`` is (H, W, A, 4).
    """
    pr = np.concatenate([p.reshape(-1, p.shape[-1]) for p in probs])
    dl = np.concatenate([d.reshape(-1, 4) for d in deltas]).astype(np.float64)
    scores = 1.0 - pr[:, -1].astype(np.float64)
    classes = pr[:, :-1].argmax(axis=1)
    # a threshold of 1 admits nothing, even anchors whose background prob underflowed
    keep = np.nonzero(scores >= score_thr)[0] if score_thr < 1.0 else np.zeros(0, dtype=np.int64)
    if len(keep) == 0:
        return []
    if len(keep) > pre_nms:
        keep = keep[np.argsort(-scores[keep], kind="stable")[:pre_nms]]
        keep.sort()
    anchors = layout.all_anchors()[keep]
    boxes = decode_boxes(np.clip(dl[keep], -6, 6), anchors)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, layout.image_width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, layout.image_height)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, sc, cl = boxes[ok], scores[keep][ok], classes[keep][ok]
    kept = nms_indices(boxes, sc, cl, nms_thr)[:max_dets]
    return [Detection(Box(*boxes[i].tolist()), int(cl[i]), float(sc[i])) for i in kept]


def predict_batch(params, images, arch: ArchConfig, score_thr: float = 0.05,
                  nms_thr: float = 0.5, max_dets: int = 100) -> list:
    out = forward(params, images, arch)
    probs = [lv.class_probs for lv in out.levels]
    deltas = [lv.deltas.data for lv in out.levels]
    return [
        detections_from_arrays([p[b] for p in probs], [d[b] for d in deltas], out.layout,
                               score_thr, nms_thr, max_dets)
        for b in range(probs[0].shape[0])
    ]


def predict_detections(params, image, arch: ArchConfig, score_thr: float = 0.05,
                       nms_thr: float = 0.5, max_dets: int = 100) -> list:
    return predict_batch(params, np.asarray(image)[None], arch, score_thr, nms_thr, max_dets)[0]


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"SEDCKPT\n"
CKPT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def save_checkpoint(path, groups: dict, arch: ArchConfig, meta: dict | None = None) -> None:
    """Write ``{namespace: {name: array}}`` as little-endian float64 blobs.

    Layout: magic, u32 version, u64 header length, JSON header, raw data.
    """
    entries, blobs, offset = [], [], 0
    for ns in sorted(groups):
        for name in sorted(groups[ns]):
            arr = np.asarray(groups[ns][name])
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": f"{ns}/{name}", "shape": list(arr.shape),
                            "dtype": arr.dtype.name, "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = json.dumps({"version": CKPT_VERSION, "arch": arch.to_dict(), "meta": meta or {},
                         "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, ArchConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointVersionError(f"{path} is not a sedkit checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    start = len(CKPT_MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen])
    base = start + hlen
    groups: dict = {}
    for e in header["tensors"]:
        ns, name = e["name"].split("/", 1)
        arr = np.frombuffer(raw, dtype="<f8", count=e["nbytes"] // 8, offset=base + e["offset"])
        groups.setdefault(ns, {})[name] = arr.reshape(e["shape"]).astype(e["dtype"])
    return groups, ArchConfig.from_dict(header["arch"]), header["meta"]

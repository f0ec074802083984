"""Box decoding, anchor filtering, greedy NMS, and the detection pipeline.

Boxes move through this module in absolute pixel coordinates.  Two
conventions appear: anchors/priors are (cx, cy, w, h); finished boxes are
corner form (x_min, y_min, x_max, y_max).  Detection records written to disk
use (x_min, y_min, width, height).

The NMS stage is parameterized by a triple (max_input, max_output,
conf_thresh): candidates below conf_thresh are dropped, at most max_input
survivors enter each greedy suppression pass, and at most max_output boxes
leave per image.
"""

from dataclasses import dataclass, field

import numpy as np

VARIANCES = (0.1, 0.2)
DEFAULT_IOU_THRESH = 0.45
DEFAULT_NEG_THRESH = 0.99
CAP_SCOPES = ("per_class", "per_image")


@dataclass(frozen=True)
class NmsParams:
    """The (max_input, max_output, conf_thresh) suppression triple."""

    max_input: int = 400
    max_output: int = 200
    conf_thresh: float = 0.1

    def __post_init__(self):
        if self.max_input < 1:
            raise ValueError(f"max_input must be >= 1, got {self.max_input}")
        if self.max_output < 1:
            raise ValueError(f"max_output must be >= 1, got {self.max_output}")
        if not (0.0 <= self.conf_thresh < 1.0):
            raise ValueError(f"conf_thresh must be in [0, 1), got {self.conf_thresh}")

    def short(self):
        return f"({self.max_input},{self.max_output},{self.conf_thresh:g})"


@dataclass
class DetectionSet:
    """Column-wise detections: corner boxes, scores, 1-based class ids.

    `indices` carries provenance: positions into whatever candidate list the
    set was produced from (anchor rows for pipeline output).
    """

    boxes: np.ndarray
    scores: np.ndarray
    class_ids: np.ndarray
    indices: np.ndarray = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float32).reshape(-1)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int32).reshape(-1)
        k = len(self.scores)
        if self.boxes.shape[0] != k or self.class_ids.shape[0] != k:
            raise ValueError(
                f"column lengths differ: {self.boxes.shape[0]} boxes, "
                f"{k} scores, {self.class_ids.shape[0]} class ids"
            )
        if self.indices is None:
            self.indices = np.arange(k, dtype=np.int64)
        else:
            self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
            if self.indices.shape[0] != k:
                raise ValueError(f"{self.indices.shape[0]} indices for {k} detections")

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4), np.float32), np.zeros(0, np.float32), np.zeros(0, np.int32))

    def take(self, order):
        order = np.asarray(order, dtype=np.int64)
        return DetectionSet(self.boxes[order], self.scores[order],
                            self.class_ids[order], self.indices[order])


@dataclass
class NmsCounters:
    """Instrumentation: pairwise IoU evaluations and per-class candidate loads."""

    iou_evals: int = 0
    candidates_per_class: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# geometry


def iou(a, b):
    """Intersection-over-union of two corner boxes; degenerate boxes give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(a, b):
    """Pairwise IoU between two corner-box arrays: (m, 4) x (k, 4) -> (m, k)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def to_corners(cboxes):
    """(cx, cy, w, h) -> (x_min, y_min, x_max, y_max)."""
    cboxes = np.asarray(cboxes, dtype=np.float64)
    half = cboxes[..., 2:4] / 2.0
    return np.concatenate([cboxes[..., 0:2] - half, cboxes[..., 0:2] + half], axis=-1)


def to_centers(boxes):
    """(x_min, y_min, x_max, y_max) -> (cx, cy, w, h)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:4] - boxes[..., 0:2]
    return np.concatenate([boxes[..., 0:2] + wh / 2.0, wh], axis=-1)


def clip_boxes(boxes, image_size):
    return np.clip(boxes, 0.0, float(image_size))


# ---------------------------------------------------------------------------
# delta coding


def _check_variances(variances):
    vc, vs = float(variances[0]), float(variances[1])
    if vc <= 0 or vs <= 0:
        raise ValueError(f"variances must be positive, got {variances}")
    return vc, vs


def apply_deltas(anchors, deltas, variances=VARIANCES):
    """Shift/scale center-form priors by regression deltas; stays center-form.

    cx' = cx + d0 * vc * w      w' = w * exp(d2 * vs)
    cy' = cy + d1 * vc * h      h' = h * exp(d3 * vs)
    """
    vc, vs = _check_variances(variances)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if anchors.shape != deltas.shape:
        raise ValueError(f"anchors {anchors.shape} and deltas {deltas.shape} differ")
    if not np.all(np.isfinite(deltas)):
        bad = int(np.flatnonzero(~np.isfinite(deltas).all(axis=1))[0])
        raise ValueError(f"non-finite delta at row {bad}")
    if np.any(anchors[:, 2:] <= 0):
        bad = int(np.flatnonzero((anchors[:, 2:] <= 0).any(axis=1))[0])
        raise ValueError(f"anchor {bad} has non-positive size {anchors[bad, 2:]}")
    centers = anchors[:, :2] + deltas[:, :2] * vc * anchors[:, 2:]
    sizes = anchors[:, 2:] * np.exp(deltas[:, 2:] * vs)
    return np.concatenate([centers, sizes], axis=1)


def decode(anchors, deltas, variances=VARIANCES, image_size=None):
    """Deltas on center-form priors -> corner boxes, clipped when a size is given."""
    corners = to_corners(apply_deltas(anchors, deltas, variances))
    if image_size is not None:
        corners = clip_boxes(corners, image_size)
    return corners.astype(np.float32)


def encode(boxes, anchors, variances=VARIANCES):
    """Corner boxes -> deltas relative to center-form priors (decode inverse)."""
    vc, vs = _check_variances(variances)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    cb = to_centers(boxes).reshape(-1, 4)
    if anchors.shape != cb.shape:
        raise ValueError(f"anchors {anchors.shape} and boxes {cb.shape} differ")
    if np.any(cb[:, 2:] <= 0):
        bad = int(np.flatnonzero((cb[:, 2:] <= 0).any(axis=1))[0])
        raise ValueError(f"box {bad} has non-positive size {cb[bad, 2:]}")
    if np.any(anchors[:, 2:] <= 0):
        bad = int(np.flatnonzero((anchors[:, 2:] <= 0).any(axis=1))[0])
        raise ValueError(f"anchor {bad} has non-positive size {anchors[bad, 2:]}")
    d_center = (cb[:, :2] - anchors[:, :2]) / (vc * anchors[:, 2:])
    d_size = np.log(cb[:, 2:] / anchors[:, 2:]) / vs
    return np.concatenate([d_center, d_size], axis=1)


def softmax(logits, axis=-1):
    """Numerically stable softmax (float64 internally, float32 out)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def arm_filter(background_probs, neg_thresh=DEFAULT_NEG_THRESH):
    """Indices of anchors whose background probability does NOT exceed the
    threshold; confidently-background anchors leave the pipeline here."""
    if not (0.0 < neg_thresh < 1.0):
        raise ValueError(f"neg_thresh must be in (0, 1), got {neg_thresh}")
    p = np.asarray(background_probs, dtype=np.float64).reshape(-1)
    return np.flatnonzero(p <= neg_thresh)


# ---------------------------------------------------------------------------
# greedy suppression


def _ranked(scores, ids):
    """Order by score descending, ties by lower id."""
    return np.lexsort((ids, -scores.astype(np.float64)))


def nms_greedy(dets, iou_thresh=DEFAULT_IOU_THRESH, params=NmsParams(),
               counters=None, cap_scope="per_class"):
    """Deterministic classwise greedy suppression under a parameter triple.

    Candidates below conf_thresh are dropped; the strongest max_input
    survivors (per class, or per image under cap_scope="per_image") enter
    suppression; a kept box removes same-class rivals with IoU strictly
    above iou_thresh; the merged result is score-sorted and truncated to
    max_output.  Returned indices point into the input set.
    """
    if not (0.0 <= iou_thresh < 1.0):
        raise ValueError(f"iou_thresh must be in [0, 1), got {iou_thresh}")
    if cap_scope not in CAP_SCOPES:
        raise ValueError(f"cap_scope must be one of {CAP_SCOPES}, got {cap_scope!r}")

    scores = dets.scores.astype(np.float64)
    keep_mask = scores >= params.conf_thresh
    pool = np.flatnonzero(keep_mask)

    if cap_scope == "per_image" and len(pool) > params.max_input:
        order = _ranked(scores[pool], pool)
        pool = pool[order[: params.max_input]]

    kept = []
    for cls in (np.unique(dets.class_ids[pool]) if len(pool) else []):
        members = pool[dets.class_ids[pool] == cls]
        order = _ranked(scores[members], members)
        members = members[order]
        if cap_scope == "per_class" and len(members) > params.max_input:
            members = members[: params.max_input]
        if counters is not None:
            counters.candidates_per_class[int(cls)] = counters.candidates_per_class.get(int(cls), 0) + len(members)
        boxes = dets.boxes[members].astype(np.float64)
        alive = np.ones(len(members), dtype=bool)
        for i in range(len(members)):
            if not alive[i]:
                continue
            kept.append(members[i])
            rest = np.flatnonzero(alive[i + 1 :]) + i + 1
            if len(rest) == 0:
                continue
            overlaps = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
            if counters is not None:
                counters.iou_evals += len(rest)
            alive[rest[overlaps > iou_thresh]] = False

    if not kept:
        return DetectionSet.empty()
    kept = np.asarray(kept, dtype=np.int64)
    order = _ranked(scores[kept], kept)
    return dets.take(kept[order][: params.max_output])


# ---------------------------------------------------------------------------
# the full pipeline


def pipeline(arm_obj_logits, arm_deltas, odm_cls_logits, odm_deltas, anchors,
             nms_params, *, iou_thresh=DEFAULT_IOU_THRESH, neg_thresh=DEFAULT_NEG_THRESH,
             cap_scope="per_class", image_size, variances=VARIANCES,
             timer=None, counters=None):
    """Single-image post-processing over per-anchor predictions.

    Steps: soften objectness and drop confident background anchors; refine
    surviving priors with the first-stage deltas; decode final boxes from the
    refined priors; score classes; suppress.  Returned indices are anchor
    rows, so outputs stay traceable to their priors.
    """
    from contextlib import nullcontext

    def span(name):
        return nullcontext() if timer is None else timer.span(name)

    arm_obj_logits = np.asarray(arm_obj_logits)
    if arm_obj_logits.ndim != 2 or arm_obj_logits.shape[1] != 2:
        raise ValueError(f"objectness must be (anchors, 2), got {arm_obj_logits.shape}")
    n_anchors = arm_obj_logits.shape[0]
    anchors = np.asarray(anchors).reshape(-1, 4)
    if anchors.shape[0] != n_anchors:
        raise ValueError(f"{n_anchors} objectness rows for {anchors.shape[0]} anchors")

    with span("arm_filter"):
        obj = softmax(arm_obj_logits, axis=1)
        kept = arm_filter(obj[:, 0], neg_thresh)

    with span("decode"):
        refined = apply_deltas(anchors[kept], np.asarray(arm_deltas)[kept], variances)
        boxes = decode(refined, np.asarray(odm_deltas)[kept], variances, image_size=image_size)

    with span("nms"):
        cls_probs = softmax(np.asarray(odm_cls_logits)[kept], axis=1)[:, 1:]
        rows, cols = np.nonzero(cls_probs >= nms_params.conf_thresh)
        candidates = DetectionSet(
            boxes[rows],
            cls_probs[rows, cols],
            cols.astype(np.int32) + 1,
        )
        result = nms_greedy(candidates, iou_thresh, nms_params,
                            counters=counters, cap_scope=cap_scope)
        # map candidate rows back to anchor ids for provenance
        result.indices = kept[rows[result.indices]] if len(result) else result.indices
    return result


# ---------------------------------------------------------------------------
# detection records on disk


def write_detections(path, by_image):
    """Write line records: image_id,class_id,x_min,y_min,width,height,score."""
    with open(path, "w", encoding="utf-8") as f:
        for image_id in sorted(by_image):
            dets = by_image[image_id]
            for i in range(len(dets)):
                x0, y0, x1, y1 = (float(v) for v in dets.boxes[i])
                f.write(
                    f"{image_id},{int(dets.class_ids[i])},{x0!r},{y0!r},"
                    f"{(x1 - x0)!r},{(y1 - y0)!r},{float(dets.scores[i])!r}\n"
                )


def read_detections(path):
    """Read detection records back into {image_id: DetectionSet}."""
    rows = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}:{n}: expected 7 fields, got {len(parts)}")
            image_id = parts[0]
            try:
                cls = int(parts[1])
                x, y, w, h, score = (float(v) for v in parts[2:])
            except ValueError:
                raise ValueError(f"{path}:{n}: malformed numeric field") from None
            rows.setdefault(image_id, []).append((cls, x, y, w, h, score))
    out = {}
    for image_id, recs in rows.items():
        boxes = np.array([[r[1], r[2], r[1] + r[3], r[2] + r[4]] for r in recs], dtype=np.float32)
        scores = np.array([r[5] for r in recs], dtype=np.float32)
        cls = np.array([r[0] for r in recs], dtype=np.int32)
        out[image_id] = DetectionSet(boxes, scores, cls)
    return out

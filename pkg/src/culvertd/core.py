"""Shared domain vocabulary: frames, poses, masks, defect classes, records,
summaries and reports.

All types are immutable after construction and safe to share across
concurrent pipeline stages. Canonical serialization is UTF-8 JSON with the
field names used below; images are referenced by content path, never inlined.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
from scipy import ndimage


class UnknownClass(ValueError):
    """Raised when a label does not name any canonical defect class."""


class DefectClass(Enum):
    """Eight defect categories plus an explicit no-defect value."""

    CRACKS = "Cracks"
    ROOTS = "Roots"
    HOLES = "Holes"
    JOINT_PROBLEMS = "JointProblems"
    DEFORMATION = "Deformation"
    FRACTURE = "Fracture"
    EROSION_DEPOSITS = "ErosionDeposits"
    LOOSE_GASKET = "LooseGasket"
    NO_DEFECT = "NoDefect"

    @property
    def is_defect(self) -> bool:
        return self is not DefectClass.NO_DEFECT

    @classmethod
    def defect_classes(cls) -> list["DefectClass"]:
        """The eight defect values, in canonical plane order."""
        return [c for c in cls if c.is_defect]


#: Number of mask planes / defect categories.
NUM_DEFECT_CLASSES = len(DefectClass.defect_classes())

_NORMALIZE_RE = re.compile(r"[^a-z0-9]+")


def _normalize_label(label: str) -> str:
    return _NORMALIZE_RE.sub("", label.lower())


_CANONICAL_BY_NORMALIZED = {_normalize_label(c.value): c for c in DefectClass}


def parse_defect_class(label: str) -> DefectClass:
    """Parse a class label, ignoring case and separators.

    "Joint Problems", "joint_problems" and "JointProblems" all map to
    ``DefectClass.JOINT_PROBLEMS``. Raises :class:`UnknownClass` for anything
    that is not one of the nine canonical names.
    """
    key = _normalize_label(label)
    try:
        return _CANONICAL_BY_NORMALIZED[key]
    except KeyError:
        raise UnknownClass(f"unknown defect class label: {label!r}") from None


@dataclass(frozen=True)
class Pose:
    """Robot pose along the pipe.

    chainage is meters along the pipe axis from the entry point; lateral and
    vertical are meters off-axis; heading is radians.
    """

    chainage: float
    lateral: float = 0.0
    vertical: float = 0.0
    heading: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.chainage < 0:
            raise ValueError(f"chainage must be >= 0, got {self.chainage}")

    def to_dict(self) -> dict[str, float]:
        return {
            "chainage": self.chainage,
            "lateral": self.lateral,
            "vertical": self.vertical,
            "heading": self.heading,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Pose":
        return cls(**{k: float(d[k]) for k in ("chainage", "lateral", "vertical", "heading", "timestamp")})


def pose_distance(a: Pose, b: Pose) -> float:
    """Euclidean distance over the three spatial fields (meters)."""
    return math.sqrt(
        (a.chainage - b.chainage) ** 2
        + (a.lateral - b.lateral) ** 2
        + (a.vertical - b.vertical) ** 2
    )


@dataclass(frozen=True)
class Frame:
    """One timestamped RGB capture with its odometry pose.

    image is an H x W x 3 uint8 array; image_ref optionally points at the
    on-disk pixmap when the frame is serialized.
    """

    frame_id: int
    image: np.ndarray
    pose: Pose
    capture_time: float
    image_ref: Optional[str] = None

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got shape {self.image.shape}")
        if self.image.shape[0] < 1 or self.image.shape[1] < 1:
            raise ValueError("image must have H >= 1 and W >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "frame_id": self.frame_id,
            "image": self.image_ref,
            "pose": self.pose.to_dict(),
            "capture_time": self.capture_time,
        }


@dataclass(frozen=True)
class SegmentationMask:
    """Per-class binary occupancy planes, shape H x W x K with K = 8.

    Planes rather than a single label image so overlapping classes on one
    pixel stay representable.
    """

    planes: np.ndarray

    def __post_init__(self) -> None:
        if self.planes.ndim != 3:
            raise ValueError(f"planes must be HxWxK, got shape {self.planes.shape}")
        if self.planes.shape[2] != NUM_DEFECT_CLASSES:
            raise ValueError(
                f"mask must have K={NUM_DEFECT_CLASSES} planes, got {self.planes.shape[2]}"
            )
        vals = np.unique(self.planes)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask planes must be binary")

    @property
    def height(self) -> int:
        return int(self.planes.shape[0])

    @property
    def width(self) -> int:
        return int(self.planes.shape[1])

    @property
    def classes(self) -> int:
        return int(self.planes.shape[2])


@dataclass(frozen=True)
class Region:
    """A 4-connected pixel region: centroid, bounding box and area."""

    centroid_row: float
    centroid_col: float
    bbox: tuple[int, int, int, int]  # (min_row, min_col, max_row, max_col) inclusive
    area_px: int

    def __post_init__(self) -> None:
        if self.area_px < 1:
            raise ValueError("region area must be >= 1 pixel")

    def to_dict(self) -> dict[str, Any]:
        return {
            "centroid_row": self.centroid_row,
            "centroid_col": self.centroid_col,
            "bbox": list(self.bbox),
            "area_px": self.area_px,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Region":
        return cls(
            centroid_row=float(d["centroid_row"]),
            centroid_col=float(d["centroid_col"]),
            bbox=tuple(int(v) for v in d["bbox"]),
            area_px=int(d["area_px"]),
        )


# 4-connectivity structuring element for component labeling.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def mask_to_regions(
    mask: SegmentationMask, min_area: int = 4
) -> list[tuple[DefectClass, Region]]:
    """Extract 4-connected components per class plane.

    Components smaller than min_area pixels are suppressed. Ordering is
    deterministic: (class plane index, centroid row, centroid col).
    """
    out: list[tuple[DefectClass, Region]] = []
    classes = DefectClass.defect_classes()
    for k, cls_ in enumerate(classes):
        plane = mask.planes[:, :, k]
        labeled, n = ndimage.label(plane, structure=_CROSS)
        if n == 0:
            continue
        regions = []
        for lbl in range(1, n + 1):
            rows, cols = np.nonzero(labeled == lbl)
            area = int(rows.size)
            if area < min_area:
                continue
            regions.append(
                Region(
                    centroid_row=float(rows.mean()),
                    centroid_col=float(cols.mean()),
                    bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
                    area_px=area,
                )
            )
        regions.sort(key=lambda r: (r.centroid_row, r.centroid_col))
        out.extend((cls_, r) for r in regions)
    return out


@dataclass(frozen=True)
class Detection:
    """A classified defect sighting on one frame."""

    defect_class: DefectClass
    confidence: float
    region: Region
    pose: Pose
    frame_id: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")
        if not self.defect_class.is_defect:
            raise ValueError("a Detection cannot carry NoDefect")

    def to_dict(self) -> dict[str, Any]:
        return {
            "frame_id": self.frame_id,
            "class": self.defect_class.value,
            "confidence": self.confidence,
            "region": self.region.to_dict(),
            "pose": self.pose.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Detection":
        return cls(
            defect_class=parse_defect_class(d["class"]),
            confidence=float(d["confidence"]),
            region=Region.from_dict(d["region"]),
            pose=Pose.from_dict(d["pose"]),
            frame_id=int(d["frame_id"]),
        )


@dataclass(frozen=True)
class DeficiencyRecord:
    """A consolidated log entry for one unique structural issue."""

    record_id: int
    defect_class: DefectClass
    representative: Detection
    member_count: int
    first_pose: Pose
    last_pose: Pose
    image_ref: Optional[str] = None
    mask_ref: Optional[str] = None

    def __post_init__(self) -> None:
        if self.member_count < 1:
            raise ValueError("member_count must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "class": self.defect_class.value,
            "representative": self.representative.to_dict(),
            "member_count": self.member_count,
            "first_pose": self.first_pose.to_dict(),
            "last_pose": self.last_pose.to_dict(),
            "image_ref": self.image_ref,
            "mask_ref": self.mask_ref,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DeficiencyRecord":
        return cls(
            record_id=int(d["record_id"]),
            defect_class=parse_defect_class(d["class"]),
            representative=Detection.from_dict(d["representative"]),
            member_count=int(d["member_count"]),
            first_pose=Pose.from_dict(d["first_pose"]),
            last_pose=Pose.from_dict(d["last_pose"]),
            image_ref=d.get("image_ref"),
            mask_ref=d.get("mask_ref"),
        )


SEVERITY_LEVELS = ("low", "medium", "high")


@dataclass(frozen=True)
class StructuredSummary:
    """Four-field inspection summary: condition, location, severity,
    implications, plus the assembled free text."""

    condition: str
    location: str
    severity: str
    implications: str
    full_text: str
    source: str = "template"  # template | remote-model

    def __post_init__(self) -> None:
        for name in ("condition", "location", "severity", "implications"):
            if not getattr(self, name).strip():
                raise ValueError(f"summary field {name!r} must be non-empty")
        for name in ("condition", "location", "severity", "implications"):
            if getattr(self, name) not in self.full_text:
                raise ValueError(f"full_text must contain the {name} text")
        if self.source not in ("template", "remote-model"):
            raise ValueError(f"invalid summary source: {self.source!r}")

    @property
    def severity_level(self) -> str:
        """Ordinal tag extracted from the severity prose; defaults to medium."""
        low = self.severity.lower()
        for level in ("high", "medium", "low"):
            if level in low:
                return level
        return "medium"

    def to_dict(self) -> dict[str, Any]:
        return {
            "condition": self.condition,
            "location": self.location,
            "severity": self.severity,
            "implications": self.implications,
            "full_text": self.full_text,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StructuredSummary":
        return cls(
            condition=d["condition"],
            location=d["location"],
            severity=d["severity"],
            implications=d["implications"],
            full_text=d["full_text"],
            source=d.get("source", "template"),
        )


@dataclass(frozen=True)
class SegmentDescriptor:
    """Static description of the inspected pipe segment."""

    pipe_length_m: float
    material: str = "concrete"

    def to_dict(self) -> dict[str, Any]:
        return {"pipe_length_m": self.pipe_length_m, "material": self.material}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SegmentDescriptor":
        return cls(pipe_length_m=float(d["pipe_length_m"]), material=d.get("material", "concrete"))


@dataclass(frozen=True)
class InspectionReport:
    """Final run artifact: ordered (record, summary) pairs plus telemetry."""

    run_id: str
    segment: SegmentDescriptor
    entries: tuple[tuple[DeficiencyRecord, Optional[StructuredSummary]], ...]
    telemetry_digest: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        chainages = [rec.first_pose.chainage for rec, _ in self.entries]
        if chainages != sorted(chainages):
            raise ValueError("report entries must be ordered by first_pose.chainage")

    @property
    def records(self) -> list[DeficiencyRecord]:
        return [rec for rec, _ in self.entries]

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "segment": self.segment.to_dict(),
            "entries": [
                {
                    "record": rec.to_dict(),
                    "summary": summ.to_dict() if summ is not None else None,
                    "pending": summ is None,
                }
                for rec, summ in self.entries
            ],
            "telemetry_digest": self.telemetry_digest,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "InspectionReport":
        entries = tuple(
            (
                DeficiencyRecord.from_dict(e["record"]),
                StructuredSummary.from_dict(e["summary"]) if e.get("summary") else None,
            )
            for e in d["entries"]
        )
        return cls(
            run_id=d["run_id"],
            segment=SegmentDescriptor.from_dict(d["segment"]),
            entries=entries,
            telemetry_digest=d.get("telemetry_digest", {}),
        )

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "InspectionReport":
        return cls.from_dict(json.loads(text))


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an HxWx3 uint8 image as binary PPM (P6)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM (P6) into an HxWx3 uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    header: list[bytes] = []
    pos = 0
    # Header is three whitespace-separated tokens after the magic, with
    # optional '#' comment lines.
    while len(header) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", data[pos:])
        if m is None:
            raise ValueError(f"truncated PPM header in {path}")
        pos += m.end()
        token = m.group(1)
        if not token.startswith(b"#"):
            header.append(token)
    if header[0] != b"P6":
        raise ValueError(f"not a binary PPM file: {path}")
    w, h, maxval = int(header[1]), int(header[2]), int(header[3])
    if maxval != 255:
        raise ValueError("only maxval 255 PPMs are supported")
    # Exactly one whitespace byte separates the maxval token from pixel data.
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).copy()

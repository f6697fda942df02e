from __future__ import annotations

import pytest

from culvertd.core import DefectClass, Detection, Pose, Region


def make_pose(chainage=0.0, lateral=0.0, vertical=0.0, timestamp=0.0) -> Pose:
    return Pose(chainage=chainage, lateral=lateral, vertical=vertical, timestamp=timestamp)


def make_region(area=25) -> Region:
    return Region(centroid_row=10.0, centroid_col=10.0, bbox=(8, 8, 12, 12), area_px=area)


def make_detection(
    cls=DefectClass.CRACKS,
    confidence=0.8,
    chainage=0.0,
    lateral=0.0,
    vertical=0.0,
    timestamp=0.0,
    frame_id=0,
    area=25,
) -> Detection:
    return Detection(
        defect_class=cls,
        confidence=confidence,
        region=make_region(area),
        pose=make_pose(chainage, lateral, vertical, timestamp),
        frame_id=frame_id,
    )


@pytest.fixture
def detection_factory():
    return make_detection

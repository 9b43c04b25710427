"""Small builders shared by the test modules."""
import numpy as np

from privfer.data_model import DatasetManifest, FaceRecord


def rec(video="v0", frame=0, track=0, expression="happy", variant="original", ref=None, bbox=(0.0, 0.0, 32.0, 32.0)):
    ref = ref or f"{variant}/{video}/{frame}_{track}.png"
    return FaceRecord(video, frame, track, tuple(bbox), expression, ref, variant)


def manifest_from_tracks(sizes_by_video, expression="happy", variant="original"):
    """``{video: [track sizes]}`` -> manifest with one record per (frame, track)."""
    records = []
    for vid, sizes in sizes_by_video.items():
        for tid, size in enumerate(sizes):
            for f in range(size):
                records.append(rec(vid, f, tid, expression, variant))
    return DatasetManifest(records, variant)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)

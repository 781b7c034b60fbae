"""Constant-velocity IoU tracker linking detections into sequences."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..core import BBox, Detection, DetectionFrame, Sequence, SequenceFrame


@dataclass
class _Track:
    id: int
    detections: list[Detection] = field(default_factory=list)
    frames: list[int] = field(default_factory=list)

    def predict(self, frame: int) -> BBox:
        last = self.detections[-1].bounds
        if len(self.detections) < 2:
            return last
        prev = self.detections[-2].bounds
        span = self.frames[-1] - self.frames[-2]
        vx = (last.cx_m - prev.cx_m) / span
        vy = (last.cy_m - prev.cy_m) / span
        k = frame - self.frames[-1]
        return last.shifted(vx * k, vy * k)


def _frame_keys(dets: DetectionFrame) -> list[tuple[int, list[Detection]]]:
    """Group detections by frame; frame ids fall back to timestamp rank."""
    by_time: dict[int, list[Detection]] = {}
    for d in dets:
        by_time.setdefault(d.time, []).append(d)
    frames = []
    for rank, t in enumerate(sorted(by_time)):
        group = sorted(by_time[t], key=lambda d: d.id)
        fid = group[0].frame if group[0].frame is not None else rank
        frames.append((fid, group))
    return frames


def object_tracking(dets: DetectionFrame, iou_min: float = 0.1, max_age_frames: int = 3) -> SequenceFrame:
    """Link detections frame to frame.

    Live tracks predict their box with constant velocity; pairs are matched
    greedily in order of decreasing IoU (ties by track id, then detection
    id) down to ``iou_min``.  A track that goes unmatched for more than
    ``max_age_frames`` consecutive frames is closed.
    """
    live: list[_Track] = []
    closed: list[_Track] = []
    next_id = 1
    for fid, group in _frame_keys(dets):
        still = []
        for tr in live:
            if fid - tr.frames[-1] - 1 > max_age_frames:
                closed.append(tr)
            else:
                still.append(tr)
        live = still
        pairs = []
        for tr in live:
            pred = tr.predict(fid)
            for d in group:
                iou = pred.iou(d.bounds)
                if iou >= iou_min and iou > 0:
                    pairs.append((-iou, tr.id, d.id, tr, d))
        pairs.sort(key=lambda p: p[:3])
        used_t, used_d = set(), set()
        for _, tid, did, tr, d in pairs:
            if tid in used_t or did in used_d:
                continue
            used_t.add(tid)
            used_d.add(did)
            tr.detections.append(d)
            tr.frames.append(fid)
        for d in group:
            if d.id not in used_d:
                live.append(_Track(next_id, [d], [fid]))
                next_id += 1
    closed.extend(live)
    closed.sort(key=lambda t: t.id)
    return SequenceFrame([Sequence(t.id, list(t.detections)) for t in closed])

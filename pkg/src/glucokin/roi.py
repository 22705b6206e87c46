"""Pick the reaction region out of the pruned clusters of one frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modeseek import ClusterSet

ROI = "roi"
BACKGROUND = "background"
EDGE = "edge"
ARTEFACT = "artefact"


@dataclass
class RegionAssignment:
    roi_cluster_id: int
    background_cluster_id: int
    r_hat: float
    roles: list
    single_region: bool

    def to_dict(self) -> dict:
        return {
            "roi_cluster_id": self.roi_cluster_id,
            "background_cluster_id": self.background_cluster_id,
            "r_hat": self.r_hat,
            "roles": list(self.roles),
            "single_region": self.single_region,
        }


def assign(clusters: ClusterSet) -> RegionAssignment:
    """Label clusters as ROI, background, edge or artefact.

    The two largest clusters (ties to the darker one) are the background and
    the ROI; the darker of the two is the ROI.  With a single cluster the ROI
    coincides with the background and ``single_region`` is set.  Other
    clusters are edge when their intensity lies between ROI and background,
    artefact otherwise.
    """
    n = len(clusters)
    if n == 0:
        raise ValueError("cannot assign regions without clusters")
    centers = np.asarray(clusters.centers, dtype=float)
    intensity = centers[:, 0]
    sizes = np.asarray(clusters.sizes)
    # rank by size, then darker first, then the remaining coordinates, so
    # the result does not depend on cluster order
    keys = [(-int(sizes[i]), *centers[i].tolist()) for i in range(n)]
    order = sorted(range(n), key=lambda i: keys[i])
    if n == 1:
        only = order[0]
        r = float(np.clip(intensity[only], 0.0, 100.0))
        return RegionAssignment(only, only, r, [ROI], True)
    a, b = order[0], order[1]
    roi, bg = (a, b) if (intensity[a], keys[a]) < (intensity[b], keys[b]) else (b, a)
    lo, hi = intensity[roi], intensity[bg]
    roles = []
    for i in range(n):
        if i == roi:
            roles.append(ROI)
        elif i == bg:
            roles.append(BACKGROUND)
        elif lo <= intensity[i] <= hi:
            roles.append(EDGE)
        else:
            roles.append(ARTEFACT)
    r = float(np.clip(lo, 0.0, 100.0))
    return RegionAssignment(int(roi), int(bg), r, roles, False)

"""Online context clustering with a clustering-feature tree

Step one absorbs each context into a leaf clustering feature (CF); step two
agglomerates leaf CFs into at most N_c published centers. Published centers
keep their ids across rebuilds whenever a new center lands near an old one,
so the Exp3 instance attached to a cluster survives small center moves.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from spclab.utils.errors import ContractViolationError, NoCentersError

logger = logging.getLogger(__name__)


@dataclass
class ClusteringFeature:
    """Additive summary (N, LS, SS) of a point set

    Attributes:
        count: Number of points N
        linear_sum: Vector sum of the points LS
        squared_sum: Sum of squared norms of the points SS
    """
    count: int
    linear_sum: np.ndarray
    squared_sum: float

    @classmethod
    def empty(cls, dim: int) -> "ClusteringFeature":
        return cls(0, np.zeros(dim), 0.0)

    @classmethod
    def from_point(cls, x: np.ndarray) -> "ClusteringFeature":
        x = np.asarray(x, dtype=np.float64)
        return cls(1, x.copy(), float(x @ x))

    @classmethod
    def from_points(cls, points: np.ndarray) -> "ClusteringFeature":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(points.shape[0], points.sum(axis=0), float(np.sum(points * points)))

    @property
    def dim(self) -> int:
        return int(self.linear_sum.size)

    @property
    def centroid(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.dim)
        return self.linear_sum / self.count

    @property
    def radius(self) -> float:
        """Root mean squared distance of members to the centroid"""
        if self.count == 0:
            return 0.0
        c = self.centroid
        return float(np.sqrt(max(0.0, self.squared_sum / self.count - c @ c)))

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "linear_sum": self.linear_sum.tolist(),
            "squared_sum": self.squared_sum,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusteringFeature":
        return cls(int(data["count"]), np.asarray(data["linear_sum"], dtype=np.float64),
                   float(data["squared_sum"]))


def cf_merge(a: ClusteringFeature, b: ClusteringFeature) -> ClusteringFeature:
    """Componentwise sum of two clustering features

    Raises:
        ContractViolationError: If the features have different dimensions
    """
    if a.dim != b.dim:
        raise ContractViolationError(f"cannot merge CFs of dimension {a.dim} and {b.dim}")
    return ClusteringFeature(
        a.count + b.count, a.linear_sum + b.linear_sum, a.squared_sum + b.squared_sum
    )


@dataclass(frozen=True)
class ClusterAssignment:
    """Result of mapping a context to a published center"""
    cluster_id: int
    center: np.ndarray


@dataclass
class RunningStandardizer:
    """Running per-coordinate mean/variance (Welford)

    Coordinates with zero observed variance are scaled by 1.
    """
    dim: int
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        std = np.sqrt(self.m2 / self.count)
        return np.where(std > 1e-12, std, 1.0)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"dim": self.dim, "count": self.count,
                "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "RunningStandardizer":
        return cls(data["dim"], data["count"], np.asarray(data["mean"]), np.asarray(data["m2"]))


@dataclass
class CFTree:
    """Leaf-level clustering-feature tree with a published center set

    Attributes:
        dim: Context dimension
        branching_factor: Max children per node; leaf capacity is its square
        merge_threshold: Max leaf radius after absorbing a point; raised when a
            full tree has to merge two leaves
        max_clusters: Cap N_c on published centers
        rebuild_every: Insertions between forced global rebuilds
        leaves: Leaf clustering features
        centers: Published centers keyed by cluster id
    """
    dim: int
    branching_factor: int = 8
    merge_threshold: float = 0.5
    max_clusters: int = 4
    rebuild_every: int = 50
    leaves: List[ClusteringFeature] = field(default_factory=list)
    centers: Dict[int, np.ndarray] = field(default_factory=dict)
    insertions: int = 0
    since_rebuild: int = 0

    @property
    def leaf_capacity(self) -> int:
        return self.branching_factor ** 2

    def published(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return (ids, centers) sorted by cluster id"""
        ids = np.array(sorted(self.centers), dtype=int)
        if ids.size == 0:
            return ids, np.zeros((0, self.dim))
        return ids, np.stack([self.centers[i] for i in ids])

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "branching_factor": self.branching_factor,
            "merge_threshold": self.merge_threshold,
            "max_clusters": self.max_clusters,
            "rebuild_every": self.rebuild_every,
            "leaves": [leaf.to_dict() for leaf in self.leaves],
            "centers": {str(k): v.tolist() for k, v in self.centers.items()},
            "insertions": self.insertions,
            "since_rebuild": self.since_rebuild,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CFTree":
        return cls(
            dim=data["dim"],
            branching_factor=data["branching_factor"],
            merge_threshold=data["merge_threshold"],
            max_clusters=data["max_clusters"],
            rebuild_every=data["rebuild_every"],
            leaves=[ClusteringFeature.from_dict(leaf) for leaf in data["leaves"]],
            centers={int(k): np.asarray(v, dtype=np.float64) for k, v in data["centers"].items()},
            insertions=data["insertions"],
            since_rebuild=data["since_rebuild"],
        )


def _closest_pair(features: List[ClusteringFeature]) -> Tuple[int, int]:
    """Indices (i < j) of the two features with the closest centroids"""
    centroids = np.stack([f.centroid for f in features])
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    dist[np.tril_indices(len(features))] = np.inf
    flat = int(np.argmin(dist))
    return divmod(flat, len(features))


def cf_insert(tree: CFTree, x: np.ndarray) -> ClusterAssignment:
    """Absorb a context into the tree and return its assignment

    The point joins the nearest leaf that stays within the merge threshold,
    otherwise it opens a new leaf. Over capacity the two closest leaves merge
    and the threshold rises to the merged radius when that is larger.

    Raises:
        ContractViolationError: On wrong dimension or non-finite coordinates
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tree.dim,):
        raise ContractViolationError(f"context has shape {x.shape}, tree expects ({tree.dim},)")
    if not np.all(np.isfinite(x)):
        raise ContractViolationError("context has non-finite coordinates")

    point = ClusteringFeature.from_point(x)
    created = True
    if tree.leaves:
        centroids = np.stack([leaf.centroid for leaf in tree.leaves])
        order = np.argsort(np.linalg.norm(centroids - x, axis=1), kind="stable")
        for i in order:
            merged = cf_merge(tree.leaves[i], point)
            if merged.radius <= tree.merge_threshold:
                tree.leaves[i] = merged
                created = False
                break
    if created:
        tree.leaves.append(point)
        if len(tree.leaves) > tree.leaf_capacity:
            i, j = _closest_pair(tree.leaves)
            merged = cf_merge(tree.leaves[i], tree.leaves[j])
            if merged.radius > tree.merge_threshold:
                logger.debug("Raising merge threshold %.4f -> %.4f at leaf capacity %d",
                             tree.merge_threshold, merged.radius, tree.leaf_capacity)
                tree.merge_threshold = float(merged.radius)
            tree.leaves[i] = merged
            del tree.leaves[j]

    tree.insertions += 1
    tree.since_rebuild += 1
    if (
        not tree.centers
        or created
        or len(tree.leaves) <= tree.max_clusters
        or tree.since_rebuild >= tree.rebuild_every
    ):
        rebuild_global(tree)
    return assign(tree, x)


def assign(tree: CFTree, x: np.ndarray) -> ClusterAssignment:
    """Nearest published center; ties go to the lower cluster id

    Raises:
        NoCentersError: If the tree has not published any center
    """
    ids, centers = tree.published()
    if ids.size == 0:
        raise NoCentersError("clustering tree has no published centers")
    distances = np.linalg.norm(centers - np.asarray(x, dtype=np.float64), axis=1)
    best = int(np.argmin(distances))
    return ClusterAssignment(int(ids[best]), centers[best].copy())


def agglomerate(leaves: List[ClusteringFeature], max_clusters: int) -> List[ClusteringFeature]:
    """Merge closest-centroid pairs until at most max_clusters features remain"""
    features = list(leaves)
    while len(features) > max_clusters:
        i, j = _closest_pair(features)
        features[i] = cf_merge(features[i], features[j])
        del features[j]
    return features


def rebuild_global(tree: CFTree) -> Dict[int, np.ndarray]:
    """Global pass: agglomerate leaves into <= N_c centers and publish them

    New centers inherit the id of the nearest old center (greedy over pairs by
    ascending distance); the rest take the smallest free id.
    """
    if not tree.leaves:
        return dict(tree.centers)
    new_centers = [f.centroid for f in agglomerate(tree.leaves, tree.max_clusters)]
    old = dict(tree.centers)

    pairs = sorted(
        (float(np.linalg.norm(c - old[k])), i, k)
        for i, c in enumerate(new_centers)
        for k in sorted(old)
    )
    given: Dict[int, int] = {}
    taken = set()
    for _, i, k in pairs:
        if i in given or k in taken:
            continue
        given[i] = k
        taken.add(k)

    free = [k for k in range(tree.max_clusters) if k not in taken]
    published: Dict[int, np.ndarray] = {}
    for i, center in enumerate(new_centers):
        cid = given[i] if i in given else free.pop(0)
        published[cid] = center

    retired = set(old) - set(published)
    if retired:
        logger.debug("Retired cluster ids %s during rebuild", sorted(retired))
    tree.centers = published
    tree.since_rebuild = 0
    return dict(published)

"""Synthetic multi-view scenes standing in for the frozen feature and depth backbones.

Objects are spheres and axis-aligned boxes rendered by analytic ray casting.
Each pixel gets a depth, an instance id and a feature vector (its class vector
plus Gaussian noise). Scenes serialize to a versioned dataset directory.
"""
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import DatasetSpec, SceneDefaults
from errors import (ChecksumError, DatasetError, DatasetVersionError, GenerationError,
                    PreconditionError, TruncatedFileError)
from geometry import Camera
from gasa import TokenGrid, tokenize_views

DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
BACKGROUND_ID = 0

CLASS_NAMES = ["background", "sphere", "cube", "chair", "table", "mug", "lamp"]
CLASS_SHAPES = [None, "sphere", "box", "box", "box", "sphere", "sphere"]
CLASS_TABLE_SEED = 7
TWIN_TILT_DEG = 20.0
TWIN_RADIUS = 0.4

SeedLike = Union[int, Sequence[int]]


@dataclass
class ClassTable:
    names: List[str]
    shapes: List[Optional[str]]
    vectors: np.ndarray  # (C, F) unit rows; row 0 is the reserved background vector

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"Unknown class '{name}'") from None

    def to_dict(self) -> Dict:
        return {"names": self.names, "shapes": self.shapes, "vectors": self.vectors.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "ClassTable":
        return cls(names=list(data["names"]), shapes=list(data["shapes"]),
                   vectors=np.asarray(data["vectors"], dtype=np.float32))


def default_class_table(feature_dim: int = 32, seed: int = CLASS_TABLE_SEED) -> ClassTable:
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(len(CLASS_NAMES), feature_dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return ClassTable(names=list(CLASS_NAMES), shapes=list(CLASS_SHAPES), vectors=vectors.astype(np.float32))


@dataclass
class SceneObject:
    """A primitive. `size` is the radius of a sphere or the half-extent(s) of a box."""

    shape: str
    center: np.ndarray
    size: Union[float, np.ndarray]
    class_id: int
    instance_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.shape not in ("sphere", "box"):
            raise GenerationError(f"Unknown primitive '{self.shape}'")

    @property
    def half_extents(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)).copy()

    def to_dict(self) -> Dict:
        size = self.size.tolist() if isinstance(self.size, np.ndarray) else float(self.size)
        return {"shape": self.shape, "center": self.center.tolist(), "size": size,
                "class_id": self.class_id, "instance_id": self.instance_id}

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneObject":
        size = data["size"]
        return cls(shape=data["shape"], center=np.asarray(data["center"]),
                   size=np.asarray(size) if isinstance(size, list) else float(size),
                   class_id=int(data["class_id"]), instance_id=int(data["instance_id"]))


@dataclass
class SceneSpec:
    objects: List[SceneObject]
    cameras: List[Camera]
    width: int = 32
    height: int = 32
    feature_dim: int = 32
    depth_noise: float = 0.02
    feature_noise: float = 0.1
    seed: SeedLike = 0
    ground_plane: bool = True
    far_plane: float = 20.0


@dataclass
class SceneView:
    camera: Camera
    features: np.ndarray      # (H, W, F) float32
    depth: np.ndarray         # (H, W) float32
    instance_ids: np.ndarray  # (H, W) uint16
    class_ids: np.ndarray     # (H, W) uint16


@dataclass
class SceneSample:
    views: List[SceneView]
    objects: List[SceneObject]
    class_table: ClassTable
    scene_id: str = "scene"
    seed: SeedLike = 0
    _tokens: Dict[int, TokenGrid] = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> List[Camera]:
        return [view.camera for view in self.views]

    def object(self, instance_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise KeyError(f"No instance {instance_id} in {self.scene_id}")

    def class_name(self, class_id: int) -> str:
        return self.class_table.names[class_id]

    def instances_of(self, class_id: int) -> List[SceneObject]:
        return [obj for obj in self.objects if obj.class_id == class_id]

    def gt_masks(self, instance_id: int) -> np.ndarray:
        """(V, H, W) bool mask of one instance."""
        return np.stack([view.instance_ids == instance_id for view in self.views])

    def class_masks(self, class_id: int) -> np.ndarray:
        return np.stack([view.class_ids == class_id for view in self.views])

    def text_embedding(self, class_id: int) -> np.ndarray:
        return self.class_table.vectors[class_id]

    def tokens(self, block: int = 4) -> TokenGrid:
        if block not in self._tokens:
            self._tokens[block] = tokenize_views(
                [v.features for v in self.views], [v.depth for v in self.views],
                [v.camera for v in self.views], block,
            )
        return self._tokens[block]

    def token_instances(self, block: int = 4) -> np.ndarray:
        """Instance id under each token's anchor pixel, (V, n); 0 is background."""
        anchors = self.tokens(block).anchors
        return np.stack([view.instance_ids.reshape(-1)[anchors[v]] for v, view in enumerate(self.views)])


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def _intersect_sphere(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Smallest positive t with |o + t d - c| = r, inf on a miss."""
    oc = origin - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * dirs @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = (-b - root) / (2.0 * a)
    far = (-b + root) / (2.0 * a)
    t = np.where(near > 0, near, far)
    return np.where(hit & (t > 0), t, np.inf)


def _intersect_box(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (center - half - origin) / safe
    t2 = (center + half - origin) / safe
    t_near = np.max(np.minimum(t1, t2), axis=-1)
    t_far = np.min(np.maximum(t1, t2), axis=-1)
    hit = t_far >= np.maximum(t_near, 0.0)
    t = np.where(t_near > 0, t_near, t_far)
    return np.where(hit & (t > 0), t, np.inf)


def _cast(camera: Camera, objects: Sequence[SceneObject], ground_plane: bool, far_plane: float
          ) -> Tuple[np.ndarray, np.ndarray]:
    """Depth (ray parameter, equal to camera z) and instance id per pixel."""
    dirs = camera.ray_directions()
    origin = camera.translation
    depth = np.full(dirs.shape[:2], far_plane, dtype=np.float64)
    if ground_plane:
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
        depth = np.where((t_ground > 0) & (t_ground < far_plane), t_ground, depth)
    instance = np.full(dirs.shape[:2], BACKGROUND_ID, dtype=np.int64)
    for obj in objects:
        if obj.shape == "sphere":
            t = _intersect_sphere(origin, dirs, obj.center, float(obj.size))
        else:
            t = _intersect_box(origin, dirs, obj.center, obj.half_extents)
        closer = t < depth
        depth = np.where(closer, t, depth)
        instance = np.where(closer, obj.instance_id, instance)
    return depth, instance


def render(spec: SceneSpec, class_table: Optional[ClassTable] = None, scene_id: str = "scene") -> SceneSample:
    """Render every camera of a scene spec into features, depth and id maps."""
    if not spec.objects or not spec.cameras:
        raise GenerationError("A scene needs at least one object and one camera")
    ids = [obj.instance_id for obj in spec.objects]
    if len(set(ids)) != len(ids) or BACKGROUND_ID in ids:
        raise GenerationError(f"Instance ids must be unique and non-zero, got {ids}")
    class_table = class_table or default_class_table(spec.feature_dim)
    if class_table.vectors.shape[1] != spec.feature_dim:
        raise GenerationError(
            f"Class vectors have dim {class_table.vectors.shape[1]}, scene wants {spec.feature_dim}"
        )
    for obj in spec.objects:
        if not any(cam.to_camera_frame(obj.center)[2] > 0 for cam in spec.cameras):
            raise GenerationError(f"Instance {obj.instance_id} is behind every camera")

    rng = np.random.default_rng(spec.seed)
    class_of = {obj.instance_id: obj.class_id for obj in spec.objects}
    class_of[BACKGROUND_ID] = BACKGROUND_ID
    views = []
    for camera in spec.cameras:
        if (camera.height, camera.width) != (spec.height, spec.width):
            raise GenerationError(
                f"Camera image plane {camera.height}x{camera.width} != scene {spec.height}x{spec.width}"
            )
        depth, instance = _cast(camera, spec.objects, spec.ground_plane, spec.far_plane)
        class_ids = np.vectorize(class_of.get, otypes=[np.int64])(instance)
        features = class_table.vectors[class_ids].astype(np.float64)
        if spec.feature_noise > 0:
            features = features + rng.normal(0.0, spec.feature_noise, size=features.shape)
        if spec.depth_noise > 0:
            scale = np.clip(1.0 + rng.normal(0.0, spec.depth_noise, size=depth.shape), 0.05, None)
            depth = depth * scale
        views.append(SceneView(
            camera=camera,
            features=features.astype(np.float32),
            depth=depth.astype(np.float32),
            instance_ids=instance.astype(np.uint16),
            class_ids=class_ids.astype(np.uint16),
        ))
    return SceneSample(views=views, objects=list(spec.objects), class_table=class_table,
                       scene_id=scene_id, seed=spec.seed)


# ---------------------------------------------------------------------------
# Scene layouts
# ---------------------------------------------------------------------------

def ring_cameras(num_views: int, azimuths_deg: Sequence[float], radius: float = 4.5, height: float = 1.8,
                 target=(0.0, 0.0, 0.3), focal: float = 40.0, width: int = 32, image_height: int = 32
                 ) -> List[Camera]:
    cameras = []
    for az in list(azimuths_deg)[:num_views]:
        a = np.deg2rad(az)
        eye = (radius * np.cos(a), radius * np.sin(a), height)
        cameras.append(Camera.look_at(eye, target, focal, focal, width, image_height))
    return cameras


def make_twin_scene(separation: float, seed: SeedLike = 0, depth_noise: Optional[float] = None,
                    feature_noise: Optional[float] = None, class_table: Optional[ClassTable] = None,
                    defaults: Optional[SceneDefaults] = None) -> SceneSample:
    """Two identical spheres `separation` meters apart plus one cube distractor.

    View 0 looks along +y from 8 m away with fx = 64, so each twin covers
    at least one token anchor pixel. The twin axis is turned
    TWIN_TILT_DEG out of the image plane, so instance 1 is the left twin and
    instance 2 the nearer one. The other views sit on a ring around the scene.
    """
    if not separation > 0:
        raise PreconditionError(f"Twin separation must be > 0, got {separation}")
    defaults = defaults or SceneDefaults()
    class_table = class_table or default_class_table(defaults.feature_dim)
    sphere = class_table.index("sphere")
    cube = class_table.index("cube")
    tilt = np.deg2rad(TWIN_TILT_DEG)
    dx, dy = 0.5 * separation * np.cos(tilt), 0.5 * separation * np.sin(tilt)
    objects = [
        SceneObject("sphere", (-dx, dy, 1.0), TWIN_RADIUS, sphere, 1),
        SceneObject("sphere", (dx, -dy, 1.0), TWIN_RADIUS, sphere, 2),
        SceneObject("box", (0.0, 1.0, 0.25), 0.25, cube, 3),
    ]
    w, h = defaults.width, defaults.height
    cameras = [Camera.look_at((0.0, -8.0, 1.0), (0.0, 0.0, 1.0), 64.0, 64.0, w, h)]
    cameras += ring_cameras(defaults.num_views - 1, (-30.0, -150.0, 90.0), target=(0.0, 0.3, 0.6),
                            focal=defaults.focal, width=w, image_height=h)
    spec = SceneSpec(
        objects=objects, cameras=cameras, width=w, height=h, feature_dim=defaults.feature_dim,
        depth_noise=defaults.depth_noise if depth_noise is None else depth_noise,
        feature_noise=defaults.feature_noise if feature_noise is None else feature_noise,
        seed=seed, far_plane=defaults.far_plane,
    )
    return render(spec, class_table, scene_id=f"twin_{separation:g}")


def random_scene_spec(rng: np.random.Generator, defaults: SceneDefaults, class_table: ClassTable,
                      min_objects: int = 2, max_objects: int = 5) -> List[SceneObject]:
    """Non-overlapping primitives resting on the floor; often repeats a class."""
    count = int(rng.integers(min_objects, max_objects + 1))
    classes = list(range(1, len(class_table.names)))
    objects: List[SceneObject] = []
    attempts = 0
    while len(objects) < count and attempts < 200:
        attempts += 1
        if objects and rng.random() < 0.5:
            class_id = objects[int(rng.integers(len(objects)))].class_id
        else:
            class_id = int(rng.choice(classes))
        size = float(rng.uniform(0.3, 0.45))
        xy = rng.uniform(-1.2, 1.2, size=2)
        center = np.array([xy[0], xy[1], size])
        if any(np.linalg.norm(center[:2] - o.center[:2]) < size + float(np.max(o.half_extents)) + 0.1
               for o in objects):
            continue
        objects.append(SceneObject(class_table.shapes[class_id], center, size, class_id, len(objects) + 1))
    return objects


def generate_scene(dataset: DatasetSpec, index: int, class_table: Optional[ClassTable] = None,
                   twin: bool = False) -> SceneSample:
    """Scene `index` of a dataset, seeded from (dataset seed, index)."""
    defaults = dataset.scene
    class_table = class_table or default_class_table(defaults.feature_dim)
    seed = [dataset.seed, index]
    rng = np.random.default_rng(seed)
    if twin:
        separation = float(rng.uniform(1.5, 3.0))
        sample = make_twin_scene(separation, seed=seed + [1], class_table=class_table, defaults=defaults)
        sample.scene_id = f"scene_{index:04d}"
        return sample
    objects = random_scene_spec(rng, defaults, class_table, dataset.min_objects, dataset.max_objects)
    offset = float(rng.uniform(0.0, 360.0))
    azimuths = [offset + k * 360.0 / defaults.num_views for k in range(defaults.num_views)]
    cameras = ring_cameras(defaults.num_views, azimuths, focal=defaults.focal,
                           width=defaults.width, image_height=defaults.height)
    spec = SceneSpec(
        objects=objects, cameras=cameras, width=defaults.width, height=defaults.height,
        feature_dim=defaults.feature_dim, depth_noise=defaults.depth_noise,
        feature_noise=defaults.feature_noise, seed=seed + [1], far_plane=defaults.far_plane,
    )
    return render(spec, class_table, scene_id=f"scene_{index:04d}")


def twin_indices(num_scenes: int, twin_fraction: float) -> List[int]:
    count = int(round(num_scenes * twin_fraction))
    if count == 0:
        return []
    return sorted({int(i) for i in np.linspace(0, num_scenes - 1, count)})


def generate_dataset(dataset: DatasetSpec, class_table: Optional[ClassTable] = None,
                     workers: int = 1) -> List[SceneSample]:
    class_table = class_table or default_class_table(dataset.scene.feature_dim)
    twins = set(twin_indices(dataset.num_scenes, dataset.twin_fraction))

    def build(index: int) -> SceneSample:
        return generate_scene(dataset, index, class_table, twin=index in twins)

    if workers <= 1:
        return [build(i) for i in range(dataset.num_scenes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(build, range(dataset.num_scenes)))


# ---------------------------------------------------------------------------
# Dataset directory
# ---------------------------------------------------------------------------

_PAYLOADS = {
    "features": ("<f4", lambda view: view.features),
    "depth": ("<f4", lambda view: view.depth),
    "instance": ("<u2", lambda view: view.instance_ids),
    "class": ("<u2", lambda view: view.class_ids),
}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(path: str, samples: Sequence[SceneSample], seed: int = 0) -> str:
    """Write a manifest plus flat little-endian payloads per scene. Returns the manifest path."""
    if not samples:
        raise DatasetError("Refusing to write an empty dataset")
    os.makedirs(path, exist_ok=True)
    first = samples[0].views[0]
    height, width, feature_dim = first.features.shape
    scenes = []
    for sample in samples:
        scene_dir = os.path.join(path, sample.scene_id)
        os.makedirs(scene_dir, exist_ok=True)
        files = {}
        for name, (dtype, getter) in _PAYLOADS.items():
            array = np.stack([getter(view) for view in sample.views]).astype(dtype)
            data = array.tobytes(order="C")
            relative = f"{sample.scene_id}/{name}.bin"
            with open(os.path.join(path, relative), "wb") as f:
                f.write(data)
            files[name] = {"path": relative, "dtype": dtype, "shape": list(array.shape),
                           "bytes": len(data), "sha256": _sha256(data)}
        seed_value = sample.seed if isinstance(sample.seed, int) else list(sample.seed)
        scenes.append({
            "scene_id": sample.scene_id,
            "seed": seed_value,
            "cameras": [cam.to_dict() for cam in sample.cameras],
            "objects": [obj.to_dict() for obj in sample.objects],
            "files": files,
        })
    manifest = {
        "version": DATASET_VERSION,
        "seed": seed,
        "dims": {"views": samples[0].num_views, "height": height, "width": width,
                 "feature_dim": feature_dim},
        "class_table": samples[0].class_table.to_dict(),
        "scenes": scenes,
    }
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"Dataset written: {manifest_path} ({len(scenes)} scenes)")
    return manifest_path


def read_manifest(path: str) -> Dict:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"No {MANIFEST_NAME} in {path}")
    with open(manifest_path, "r") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{manifest_path} is not valid JSON: {e}") from e
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetVersionError(
            f"{manifest_path} has version {manifest.get('version')!r}, expected {DATASET_VERSION}"
        )
    return manifest


def _read_payload(root: str, entry: Dict) -> np.ndarray:
    file_path = os.path.join(root, entry["path"])
    if not os.path.exists(file_path):
        raise TruncatedFileError(f"Missing payload file {entry['path']}")
    with open(file_path, "rb") as f:
        data = f.read()
    if len(data) != entry["bytes"]:
        raise TruncatedFileError(
            f"{entry['path']}: {len(data)} bytes on disk, manifest says {entry['bytes']}"
        )
    if _sha256(data) != entry["sha256"]:
        raise ChecksumError(f"Checksum mismatch in {entry['path']}")
    return np.frombuffer(data, dtype=entry["dtype"]).reshape(entry["shape"])


def _scene_from_entry(root: str, entry: Dict, class_table: ClassTable) -> SceneSample:
    arrays = {name: _read_payload(root, entry["files"][name]) for name in _PAYLOADS}
    cameras = [Camera.from_dict(c) for c in entry["cameras"]]
    views = [
        SceneView(
            camera=cam,
            features=arrays["features"][v].astype(np.float32),
            depth=arrays["depth"][v].astype(np.float32),
            instance_ids=arrays["instance"][v].astype(np.uint16),
            class_ids=arrays["class"][v].astype(np.uint16),
        )
        for v, cam in enumerate(cameras)
    ]
    seed = entry["seed"]
    return SceneSample(views=views, objects=[SceneObject.from_dict(o) for o in entry["objects"]],
                       class_table=class_table, scene_id=entry["scene_id"],
                       seed=seed if isinstance(seed, int) else list(seed))


def read_dataset(path: str) -> List[SceneSample]:
    manifest = read_manifest(path)
    class_table = ClassTable.from_dict(manifest["class_table"])
    return [_scene_from_entry(path, entry, class_table) for entry in manifest["scenes"]]


def read_scene(path: str, index: int) -> SceneSample:
    manifest = read_manifest(path)
    scenes = manifest["scenes"]
    if not 0 <= index < len(scenes):
        raise DatasetError(f"Scene index {index} out of range (dataset has {len(scenes)} scenes)")
    return _scene_from_entry(path, scenes[index], ClassTable.from_dict(manifest["class_table"]))

"""Dataset manifests, fold handling, class catalogs and super-category relabeling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import check_labels


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered scene-class names; positions define the class indices."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("a catalog needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class name {name!r}") from None


def synthetic_catalog(n_classes: int) -> ClassCatalog:
    """Placeholder catalog (class_00, class_01, ...) for simulated experiments."""
    return ClassCatalog(tuple(f"class_{i:02d}" for i in range(n_classes)))


@dataclass(frozen=True)
class ManifestEntry:
    segment_id: str
    path: str
    class_index: int
    folds: tuple[int | None, ...]


@dataclass(frozen=True)
class DatasetManifest:
    """Validated listing of audio segments, their labels and fold assignments.

    ``folds[s]`` of an entry is the fold whose *test* set contains the segment
    under split ``s``, or None when the segment is not used by that split.
    """

    catalog: ClassCatalog
    entries: tuple[ManifestEntry, ...]
    channel_count: int | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.segment_id in seen:
                raise ValueError(f"duplicate segment_id {e.segment_id!r}")
            seen.add(e.segment_id)
            if not 0 <= e.class_index < self.catalog.n_classes:
                raise ValueError(f"class index {e.class_index} out of range for {e.segment_id!r}")
        n_splits = {len(e.folds) for e in self.entries}
        if len(n_splits) > 1:
            raise ValueError("all entries must declare the same number of splits")
        for s in range(self.n_splits):
            ids = sorted({e.folds[s] for e in self.entries if e.folds[s] is not None})
            if not ids:
                raise ValueError(f"split {s} assigns no segments")
            if ids != list(range(len(ids))):
                raise ValueError(f"fold ids of split {s} must be contiguous from 0, got {ids}")

    @property
    def n_segments(self) -> int:
        return len(self.entries)

    @property
    def n_splits(self) -> int:
        return len(self.entries[0].folds) if self.entries else 0

    def fold_count(self, split: int = 0) -> int:
        self._check_split(split)
        return 1 + max(e.folds[split] for e in self.entries if e.folds[split] is not None)

    def label_of(self, segment_id: str) -> int:
        for e in self.entries:
            if e.segment_id == segment_id:
                return e.class_index
        raise KeyError(f"unknown segment_id {segment_id!r}")

    def labels(self) -> dict[str, int]:
        return {e.segment_id: e.class_index for e in self.entries}

    def _check_split(self, split: int) -> None:
        if not 0 <= split < self.n_splits:
            raise ValueError(f"split {split} out of range [0, {self.n_splits})")


def load_manifest(
    path, catalog: ClassCatalog | None = None, *, require_audio: bool = True
) -> DatasetManifest:
    """Parse and validate a manifest file.

    Format: header ``segment_id,path,class_name,<split column>[,...]`` followed
    by one row per segment. Audio paths are resolved relative to the manifest.
    When no catalog is given, one is inferred from the sorted class names.
    ``require_audio=False`` skips the file-existence check (predictions-only
    workflows where the audio is not local).
    """
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty manifest")
    header = [c.strip() for c in rows[0]]
    if len(header) < 4 or header[:3] != ["segment_id", "path", "class_name"]:
        raise ValueError(
            f"{path}: header must start with segment_id,path,class_name and declare "
            "at least one split column"
        )

    records: list[tuple[int, str, str, str, tuple[int | None, ...]]] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        seg, audio, cls = (c.strip() for c in row[:3])
        folds: list[int | None] = []
        for cell in row[3:]:
            cell = cell.strip()
            if not cell:
                folds.append(None)
                continue
            try:
                fold = int(cell)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: fold value {cell!r} is not an integer") from None
            if fold < 0:
                raise ValueError(f"{path}:{lineno}: fold value must be non-negative")
            folds.append(fold)
        records.append((lineno, seg, audio, cls, tuple(folds)))
    if not records:
        raise ValueError(f"{path}: manifest has no data rows")

    if catalog is None:
        catalog = ClassCatalog(tuple(sorted({r[3] for r in records})))

    entries = []
    for lineno, seg, audio, cls, folds in records:
        if cls not in catalog.names:
            raise ValueError(f"{path}:{lineno}: unknown class name {cls!r}")
        resolved = Path(audio)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        if require_audio and not resolved.exists():
            raise ValueError(f"{path}:{lineno}: audio file not found: {resolved}")
        entries.append(
            ManifestEntry(
                segment_id=seg,
                path=str(resolved),
                class_index=catalog.index(cls),
                folds=folds,
            )
        )
    return DatasetManifest(catalog=catalog, entries=tuple(entries))


def split_fold(
    manifest: DatasetManifest, fold_id: int, split: int = 0
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Train/test segment ids of one cross-validation fold.

    The test set holds the segments assigned to ``fold_id``; the train set
    holds every other segment the split uses. Segments the split does not
    assign appear in neither.
    """
    n_folds = manifest.fold_count(split)
    if not 0 <= fold_id < n_folds:
        raise ValueError(f"fold {fold_id} out of range [0, {n_folds})")
    train, test = [], []
    for e in manifest.entries:
        fold = e.folds[split]
        if fold is None:
            continue
        (test if fold == fold_id else train).append(e.segment_id)
    return tuple(train), tuple(test)


@dataclass(frozen=True)
class SuperCategory:
    """A coarse category: a non-empty set of original class indices."""

    id: int
    members: frozenset[int]
    name: str = ""

    def __post_init__(self):
        if not self.members:
            raise ValueError("a super category cannot be empty")
        if any((not isinstance(m, (int, np.integer))) or m < 0 for m in self.members):
            raise ValueError("members must be non-negative class indices")
        if self.id < 0:
            raise ValueError("id must be non-negative")

    @property
    def sorted_members(self) -> tuple[int, ...]:
        return tuple(sorted(self.members))

    @property
    def task_classes(self) -> int:
        """Output count of the matching super classifier: members plus the negative class."""
        return len(self.members) + 1


@dataclass(frozen=True)
class SuperCategoryPartition:
    """Disjoint cover of all class indices by super categories."""

    categories: tuple[SuperCategory, ...]

    def __post_init__(self):
        if not self.categories:
            raise ValueError("partition needs at least one category")
        ids = [c.id for c in self.categories]
        if ids != list(range(len(self.categories))):
            raise ValueError("category ids must be 0..SN-1 in order")
        union: set[int] = set()
        total = 0
        for c in self.categories:
            union |= c.members
            total += len(c.members)
        if total != len(union):
            raise ValueError("super categories overlap")
        if union != set(range(len(union))):
            raise ValueError("super categories must cover exactly the class indices 0..CN-1")

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_classes(self) -> int:
        return sum(len(c.members) for c in self.categories)

    def category_of(self, class_index: int) -> int:
        for c in self.categories:
            if class_index in c.members:
                return c.id
        raise ValueError(f"class index {class_index} not covered by the partition")

    def as_sets(self) -> frozenset[frozenset[int]]:
        """Membership structure only, for order-insensitive comparisons."""
        return frozenset(c.members for c in self.categories)


def make_partition(member_sets, names: list[str] | None = None) -> SuperCategoryPartition:
    """Build a partition from member index sets, ordered by smallest member."""
    sets = [frozenset(int(m) for m in s) for s in member_sets]
    order = sorted(range(len(sets)), key=lambda i: min(sets[i]) if sets[i] else -1)
    cats = []
    for new_id, old in enumerate(order):
        name = names[old] if names is not None else f"super_{new_id}"
        cats.append(SuperCategory(id=new_id, members=sets[old], name=name))
    return SuperCategoryPartition(categories=tuple(cats))


def relabel_for_super(labels, category: SuperCategory, n_classes: int | None = None) -> np.ndarray:
    """Map original labels onto a super classifier's task.

    Members keep catalog order and become the dense indices 0..len(members)-1;
    every other class becomes the final index, the negative class. The output
    task therefore has ``len(members) + 1`` classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    members = category.sorted_members
    if n_classes is not None:
        labels = check_labels(labels, n_classes)
        if members and members[-1] >= n_classes:
            raise ValueError("category members exceed the class count")
    elif labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    negative = len(members)
    mapping = {m: i for i, m in enumerate(members)}
    return np.array([mapping.get(int(y), negative) for y in labels], dtype=np.int64)


def write_partition(partition: SuperCategoryPartition, catalog: ClassCatalog, path) -> None:
    """Write the partition file: one ``name: class, class, ...`` line per category."""
    if partition.n_classes != catalog.n_classes:
        raise ValueError("partition and catalog disagree on the class count")
    lines = []
    for cat in partition.categories:
        names = ", ".join(catalog.names[m] for m in cat.sorted_members)
        lines.append(f"{cat.name}: {names}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_partition(path, catalog: ClassCatalog | None = None):
    """Parse a partition file; returns ``(partition, catalog)``.

    Without an explicit catalog, one is inferred from the sorted class names
    found in the file.
    """
    path = Path(path)
    parsed: list[tuple[str, list[str]]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'name: class, class, ...'")
        name, _, rest = line.partition(":")
        members = [m.strip() for m in rest.split(",") if m.strip()]
        if not members:
            raise ValueError(f"{path}:{lineno}: category {name.strip()!r} lists no classes")
        parsed.append((name.strip(), members))
    if not parsed:
        raise ValueError(f"{path}: no categories found")
    if catalog is None:
        catalog = ClassCatalog(tuple(sorted({m for _, ms in parsed for m in ms})))
    sets, names = [], []
    for name, members in parsed:
        sets.append({catalog.index(m) for m in members})
        names.append(name)
    return make_partition(sets, names), catalog

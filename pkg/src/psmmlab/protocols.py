"""The eleven CeFA sub-protocols as declarative filters, and manifest I/O.

Splits are subject-disjoint by construction: train uses subjects 1-200,
valid 201-300 and test 301-500.  Test splits additionally receive every 3D
attack clip (mask3d, silica) whose modality matches the split; 3D clips
bypass the ethnicity and subject-range filters.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import ETHNICITIES, MODALITIES, PAIS_2D, PAIS_3D, ClipRecord

SPLITS = ("train", "valid", "test")
SUBJECT_RANGES = {"train": (1, 200), "valid": (201, 300), "test": (301, 500)}
SUB_PROTOCOLS = ("1_1", "1_2", "1_3", "2_1", "2_2", "3_1", "3_2", "3_3", "4_1", "4_2", "4_3")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class SplitFilter:
    ethnicities: frozenset[str]
    modalities: frozenset[str]
    pais: frozenset[str]
    subjects: tuple[int, int]
    include_3d: bool = False

    def matches(self, rec: ClipRecord) -> bool:
        if rec.modality not in self.modalities:
            return False
        if rec.pai in PAIS_3D:
            return self.include_3d
        lo, hi = self.subjects
        return rec.ethnicity in self.ethnicities and rec.pai in self.pais and lo <= rec.subject_id <= hi


@dataclass(frozen=True)
class ProtocolSpec:
    name: str  # "P_S"
    splits: dict[str, SplitFilter] = field(hash=False)

    @property
    def protocol(self) -> int:
        return int(self.name.split("_")[0])

    @property
    def sub_id(self) -> int:
        return int(self.name.split("_")[1])


def _f(eths, mods, pais, split, include_3d=False):
    return SplitFilter(frozenset(eths), frozenset(mods), frozenset(pais), SUBJECT_RANGES[split], include_3d)


def _builtin() -> dict[str, ProtocolSpec]:
    specs = {}
    all_e, all_m, all_p = ETHNICITIES, MODALITIES, PAIS_2D
    for s in (1, 2, 3):
        eth, mod = ETHNICITIES[s - 1], MODALITIES[s - 1]
        other_e = [e for e in ETHNICITIES if e != eth]
        other_m = [m for m in MODALITIES if m != mod]
        specs[f"1_{s}"] = ProtocolSpec(
            f"1_{s}",
            {
                "train": _f([eth], all_m, all_p, "train"),
                "valid": _f([eth], all_m, all_p, "valid"),
                "test": _f(other_e, all_m, all_p, "test", True),
            },
        )
        specs[f"3_{s}"] = ProtocolSpec(
            f"3_{s}",
            {
                "train": _f(all_e, [mod], all_p, "train"),
                "valid": _f(all_e, [mod], all_p, "valid"),
                "test": _f(all_e, other_m, all_p, "test", True),
            },
        )
        specs[f"4_{s}"] = ProtocolSpec(
            f"4_{s}",
            {
                "train": _f([eth], [mod], ["real", "replay"], "train"),
                "valid": _f([eth], [mod], ["real", "replay"], "valid"),
                "test": _f(other_e, [mod], ["real", "print"], "test", True),
            },
        )
    for s, (seen, unseen) in enumerate((("print", "replay"), ("replay", "print")), 1):
        specs[f"2_{s}"] = ProtocolSpec(
            f"2_{s}",
            {
                "train": _f(all_e, all_m, ["real", seen], "train"),
                "valid": _f(all_e, all_m, ["real", seen], "valid"),
                "test": _f(all_e, all_m, ["real", unseen], "test", True),
            },
        )
    return {name: specs[name] for name in SUB_PROTOCOLS}


BUILTIN_PROTOCOLS = _builtin()


# --------------------------------------------------------------------------
# text config: one row per (sub-protocol, split)
#   name split ethnicities modalities pais lo-hi include_3d
# --------------------------------------------------------------------------


def format_protocol_table(specs: Iterable[ProtocolSpec] | None = None) -> str:
    specs = BUILTIN_PROTOCOLS.values() if specs is None else specs
    lines = ["# name split ethnicities modalities pais subjects include_3d"]
    for spec in specs:
        for split in SPLITS:
            f = spec.splits[split]
            lines.append(
                " ".join(
                    [
                        spec.name,
                        split,
                        ",".join(e for e in ETHNICITIES if e in f.ethnicities),
                        ",".join(m for m in MODALITIES if m in f.modalities),
                        ",".join(p for p in PAIS_2D if p in f.pais),
                        f"{f.subjects[0]}-{f.subjects[1]}",
                        str(int(f.include_3d)),
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def parse_protocol_table(text: str) -> dict[str, ProtocolSpec]:
    rows: dict[str, dict[str, SplitFilter]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ProtocolError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        name, split, eths, mods, pais, subjects, inc3d = parts
        if split not in SPLITS:
            raise ProtocolError(f"line {lineno}: unknown split {split!r}")
        lo, hi = (int(x) for x in subjects.split("-"))
        flt = SplitFilter(
            frozenset(eths.split(",")), frozenset(mods.split(",")), frozenset(pais.split(",")), (lo, hi), inc3d == "1"
        )
        if not flt.ethnicities <= set(ETHNICITIES) or not flt.modalities <= set(MODALITIES):
            raise ProtocolError(f"line {lineno}: unknown ethnicity or modality")
        if not flt.pais <= set(PAIS_2D):
            raise ProtocolError(f"line {lineno}: unknown PAI in {pais!r}")
        rows.setdefault(name, {})[split] = flt
    specs = {}
    for name, splits in rows.items():
        if set(splits) != set(SPLITS):
            raise ProtocolError(f"protocol {name} must define train, valid and test")
        specs[name] = ProtocolSpec(name, splits)
    return specs


def get_protocol(name: str, table: dict[str, ProtocolSpec] | None = None) -> ProtocolSpec:
    table = BUILTIN_PROTOCOLS if table is None else table
    if name not in table:
        raise ProtocolError(f"unknown sub-protocol {name!r}; choose from {sorted(table)}")
    return table[name]


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    subject: int
    ethnicity: str
    modality: str
    pai: str
    split: str

    @property
    def sample_key(self) -> str:
        return self.path.rsplit("/", 1)[0]


Manifest = list[ManifestRow]


def protocol_split(catalog: Sequence[ClipRecord], spec: ProtocolSpec, allow_empty: bool = False) -> dict[str, Manifest]:
    out: dict[str, Manifest] = {}
    for split in SPLITS:
        flt = spec.splits[split]
        rows = [
            ManifestRow(r.path, r.label, r.subject_id, r.ethnicity, r.modality, r.pai, split)
            for r in catalog
            if flt.matches(r)
        ]
        if not rows and not allow_empty:
            raise ProtocolError(f"protocol {spec.name}: split {split!r} is empty")
        out[split] = rows
    subjects = {s: {(r.ethnicity, r.subject) for r in rows} for s, rows in out.items()}
    for a in SPLITS:
        for b in SPLITS:
            if a < b and subjects[a] & subjects[b]:
                raise ProtocolError(f"protocol {spec.name}: splits {a} and {b} share subjects")
    return out


def write_manifest(path, rows: Iterable[ManifestRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(f"{r.path} {r.label} {r.subject} {r.ethnicity} {r.modality} {r.pai} {r.split}\n")
    return path


def read_manifest(path) -> Manifest:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ProtocolError(f"{path}:{lineno}: expected 7 fields")
        p, label, subject, eth, mod, pai, split = parts
        if label not in ("0", "1"):
            raise ProtocolError(f"{path}:{lineno}: label must be 0 or 1")
        rows.append(ManifestRow(p, int(label), int(subject), eth, mod, pai, split))
    return rows


# --------------------------------------------------------------------------
# counts against the published protocol table
# --------------------------------------------------------------------------

# (real, fake, all) video counts as printed in the CeFA protocol table
REPORTED_COUNTS = {
    **{(f"1_{s}", "train"): (600, 1800, 2400) for s in (1, 2, 3)},
    **{(f"1_{s}", "valid"): (300, 900, 1200) for s in (1, 2, 3)},
    **{(f"1_{s}", "test"): (1200, 6600, 7800) for s in (1, 2, 3)},
    ("2_1", "train"): (1800, 3600, 5400),
    ("2_2", "train"): (1800, 1800, 3600),
    ("2_1", "valid"): (900, 1800, 2700),
    ("2_2", "valid"): (900, 900, 1800),
    ("2_1", "test"): (1800, 4800, 6600),
    ("2_2", "test"): (1800, 6600, 8400),
    **{(f"3_{s}", "train"): (600, 1800, 2400) for s in (1, 2, 3)},
    **{(f"3_{s}", "valid"): (300, 900, 1200) for s in (1, 2, 3)},
    **{(f"3_{s}", "test"): (1200, 5600, 6800) for s in (1, 2, 3)},
    **{(f"4_{s}", "train"): (600, 600, 1200) for s in (1, 2, 3)},
    **{(f"4_{s}", "valid"): (300, 300, 600) for s in (1, 2, 3)},
    **{(f"4_{s}", "test"): (1200, 5400, 6600) for s in (1, 2, 3)},
}


def split_counts(rows: Iterable[ManifestRow], include_3d: bool = True) -> tuple[int, int, int]:
    c = Counter(r.label for r in rows if include_3d or r.pai not in PAIS_3D)
    return c[1], c[0], c[0] + c[1]


@dataclass
class CountCheck:
    sub_protocol: str
    split: str
    derived: tuple[int, int, int]
    reported: tuple[int, int, int]
    status: str  # "match", "3d-not-derivable" or "inconsistent"


def compare_with_reported(name: str, manifests: dict[str, Manifest]) -> list[CountCheck]:
    """Compare 2D-subset counts with the published table, labelling each row.

    Test-split fake counts in the table include an unstated share of the 3D
    subset, so a mismatch there that leaves the real count intact is
    labelled ``3d-not-derivable`` rather than ``inconsistent``.
    """
    checks = []
    for split in SPLITS:
        derived = split_counts(manifests[split], include_3d=False)
        reported = REPORTED_COUNTS[(name, split)]
        if derived == reported:
            status = "match"
        elif split == "test" and derived[0] == reported[0] and derived[1] < reported[1]:
            status = "3d-not-derivable"
        else:
            status = "inconsistent"
        checks.append(CountCheck(name, split, derived, reported, status))
    return checks

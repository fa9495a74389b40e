"""Comparison protocols: fixed-gallery genuine pairs, seeded impostor pairs.

Genuine protocol: for each subject and eye, every image from the subject's
first attended collection is a gallery template, compared against every
same-eye image from strictly later collections.

Impostor protocol: the capture table is put in its global sorted order
(subject, eye, collection, time, image id); every image serves as gallery and
up to `max_impostor_probes` same-eye images of other subjects are drawn
without replacement. The draw for gallery row r uses SplitMix64 seeded with
base_seed XOR r (r = 0-based position in the sorted table), so output is
bit-identical across runs and platforms and each row's draw is independent
of every other row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import (
    GENUINE, IMPOSTOR, CaptureRecord, CaptureTable, ComparisonRecord,
    ComparisonTable, DataError, MatcherProfile, ScoreRangeError,
    pair_covariates,
)
from .rng import sample_indices
from .tableio import ScoreTable


@dataclass(frozen=True)
class PairingConfig:
    max_impostor_probes: int = 10
    base_seed: int = 0
    eye_policy: str = "same-eye-only"

    def __post_init__(self):
        if self.max_impostor_probes < 1:
            raise ValueError("max_impostor_probes must be >= 1")
        if self.eye_policy != "same-eye-only":
            raise ValueError("cross-eye comparisons are excluded by construction")


def _genuine_record(gallery: CaptureRecord, probe: CaptureRecord) -> ComparisonRecord:
    gap = probe.capture_time_months - gallery.capture_time_months
    if gap <= 0:
        raise DataError(
            f"probe {probe.image_id} in a later collection than gallery "
            f"{gallery.image_id} but not later in time")
    dc, cov = pair_covariates(gallery, probe)
    return ComparisonRecord(
        gallery_image_id=gallery.image_id, probe_image_id=probe.image_id,
        gallery_subject=gallery.subject_id, probe_subject=probe.subject_id,
        eye=gallery.eye, kind=GENUINE, gap_T_months=gap,
        delta_age_years=probe.age_years - gallery.age_years, dc=dc,
        covariates=cov,
    )


def generate_genuine_pairs(captures: CaptureTable) -> list[ComparisonRecord]:
    """Fixed-gallery genuine pairs; subjects with one collection contribute none."""
    by_subject: dict[str, list[CaptureRecord]] = {}
    for rec in captures.sorted_records():
        by_subject.setdefault(rec.subject_id, []).append(rec)

    out: list[ComparisonRecord] = []
    for subject in sorted(by_subject):
        recs = by_subject[subject]
        first = min(r.collection_index for r in recs)
        for eye in ("L", "R"):
            galleries = [r for r in recs if r.eye == eye and r.collection_index == first]
            probes = [r for r in recs if r.eye == eye and r.collection_index > first]
            for g in galleries:
                for p in probes:
                    out.append(_genuine_record(g, p))
    return out


def _impostor_record(gallery: CaptureRecord, probe: CaptureRecord) -> ComparisonRecord:
    dc, cov = pair_covariates(gallery, probe)
    return ComparisonRecord(
        gallery_image_id=gallery.image_id, probe_image_id=probe.image_id,
        gallery_subject=gallery.subject_id, probe_subject=probe.subject_id,
        eye=gallery.eye, kind=IMPOSTOR,
        gap_T_months=abs(probe.capture_time_months - gallery.capture_time_months),
        delta_age_years=probe.age_years - gallery.age_years, dc=dc,
        covariates=cov,
    )


def generate_impostor_pairs(captures: CaptureTable,
                            cfg: PairingConfig) -> list[ComparisonRecord]:
    """Seeded same-eye impostor sampling over the globally sorted table.

    Each gallery row's pool is every same-eye image of a different subject,
    in sorted order; min(pool, max_impostor_probes) probes are selected by a
    partial Fisher-Yates shuffle driven by SplitMix64(base_seed XOR row).
    The pool is indexed virtually, so nothing is materialized per row.
    """
    ordered = captures.sorted_records()
    # positions of each eye's rows, and each (subject, eye) contiguous span
    eye_rows: dict[str, list[int]] = {"L": [], "R": []}
    spans: dict[tuple[str, str], tuple[int, int]] = {}
    for idx, rec in enumerate(ordered):
        lst = eye_rows.setdefault(rec.eye, [])
        key = (rec.subject_id, rec.eye)
        if key not in spans:
            spans[key] = (len(lst), len(lst))
        a, _ = spans[key]
        lst.append(idx)
        spans[key] = (a, len(lst))

    out: list[ComparisonRecord] = []
    for row_index, gallery in enumerate(ordered):
        lst = eye_rows[gallery.eye]
        a, b = spans[(gallery.subject_id, gallery.eye)]
        own = b - a
        pool_size = len(lst) - own
        if pool_size == 0:
            continue
        k = min(pool_size, cfg.max_impostor_probes)
        seed = cfg.base_seed ^ row_index
        for pos in sample_indices(pool_size, k, seed):
            # skip over the gallery subject's own contiguous block
            j = pos if pos < a else pos + own
            out.append(_impostor_record(gallery, ordered[lst[j]]))
    return out


@dataclass(frozen=True)
class IncompletePair:
    gallery_image_id: str
    probe_image_id: str
    missing_matchers: tuple[str, ...]


@dataclass(frozen=True)
class AttachResult:
    table: ComparisonTable
    incomplete: tuple[IncompletePair, ...] = field(default_factory=tuple)


def attach_scores(pairs: list[ComparisonRecord], scores: ScoreTable,
                  profiles: list[MatcherProfile]) -> AttachResult:
    """Join one score per declared matcher onto every pair.

    Pairs with any missing (gallery, probe, matcher) cell are returned on the
    incomplete list, never silently dropped. A score outside its profile's
    range raises ScoreRangeError naming the offending row.
    """
    complete: list[ComparisonRecord] = []
    incomplete: list[IncompletePair] = []
    for rec in pairs:
        row_scores: dict[str, float] = {}
        missing: list[str] = []
        for profile in profiles:
            value = scores.get(rec.gallery_image_id, rec.probe_image_id, profile.name)
            if value is None:
                missing.append(profile.name)
                continue
            if not (profile.score_min <= value <= profile.score_max):
                raise ScoreRangeError(
                    f"score {value} for matcher {profile.name!r} on pair "
                    f"({rec.gallery_image_id}, {rec.probe_image_id}) outside "
                    f"[{profile.score_min}, {profile.score_max}]")
            row_scores[profile.name] = value
        if missing:
            incomplete.append(IncompletePair(rec.gallery_image_id,
                                             rec.probe_image_id, tuple(missing)))
            continue
        complete.append(ComparisonRecord(
            gallery_image_id=rec.gallery_image_id,
            probe_image_id=rec.probe_image_id,
            gallery_subject=rec.gallery_subject,
            probe_subject=rec.probe_subject,
            eye=rec.eye, kind=rec.kind, gap_T_months=rec.gap_T_months,
            delta_age_years=rec.delta_age_years, dc=rec.dc,
            covariates=dict(rec.covariates), scores=row_scores,
        ))
    table = ComparisonTable.from_records(complete, [p.name for p in profiles])
    return AttachResult(table, tuple(incomplete))

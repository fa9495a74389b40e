import numpy as np
import pytest

from longmatch.core import (
    GENUINE, IMPOSTOR, CaptureTable, MatcherProfile, ScoreRangeError,
)
from longmatch.pairing import (
    PairingConfig, attach_scores, generate_genuine_pairs,
    generate_impostor_pairs,
)
from longmatch.tableio import ScoreTable

from conftest import make_capture, random_capture_table


def _pair_key(rec):
    return (rec.gallery_image_id, rec.probe_image_id)


class TestGenuinePairs:
    def test_single_collection_contributes_nothing(self):
        table = CaptureTable([make_capture("I0"), make_capture("I1")])
        assert generate_genuine_pairs(table) == []

    def test_two_galleries_three_probes(self):
        recs = [
            make_capture("G0", collection=1, months=0),
            make_capture("G1", collection=1, months=0),
            make_capture("P0", collection=2, months=6),
            make_capture("P1", collection=2, months=6),
            make_capture("P2", collection=3, months=12),
        ]
        pairs = generate_genuine_pairs(CaptureTable(recs))
        assert len(pairs) == 6
        assert {p.gallery_image_id for p in pairs} == {"G0", "G1"}
        assert {p.probe_image_id for p in pairs} == {"P0", "P1", "P2"}
        assert all(p.kind == GENUINE and p.gap_T_months > 0 for p in pairs)

    def test_count_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            table = random_capture_table(rng, n_subjects=12, n_collections=5)
            assert len(table) <= 200
            pairs = generate_genuine_pairs(table)

            expected = set()
            for g in table:
                first = min(r.collection_index for r in table
                            if r.subject_id == g.subject_id)
                if g.collection_index != first:
                    continue
                for p in table:
                    if (p.subject_id == g.subject_id and p.eye == g.eye
                            and p.collection_index > first):
                        expected.add((g.image_id, p.image_id))
            assert {_pair_key(p) for p in pairs} == expected
            assert len(pairs) == len(expected)

    def test_eye_missing_from_first_collection_contributes_nothing(self):
        recs = [
            make_capture("I0", eye="L", collection=1, months=0),
            make_capture("I1", eye="R", collection=2, months=6),
            make_capture("I2", eye="R", collection=3, months=12),
        ]
        pairs = generate_genuine_pairs(CaptureTable(recs))
        # right eye absent from the first attended collection: no right pairs
        assert pairs == []


class TestImpostorPairs:
    def test_small_pool_saturates(self):
        recs = [make_capture("I0", subject="S000")]
        recs += [make_capture(f"I{i}", subject=f"S{i:03d}") for i in range(1, 5)]
        pairs = generate_impostor_pairs(CaptureTable(recs), PairingConfig(base_seed=1))
        from_first = [p for p in pairs if p.gallery_image_id == "I0"]
        assert len(from_first) == 4
        assert {p.probe_image_id for p in from_first} == {"I1", "I2", "I3", "I4"}

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(12)
        table = random_capture_table(rng, n_subjects=10)
        cfg = PairingConfig(max_impostor_probes=5, base_seed=777)
        a = generate_impostor_pairs(table, cfg)
        b = generate_impostor_pairs(table, cfg)
        assert [_pair_key(p) for p in a] == [_pair_key(p) for p in b]

    def test_exhaustive_membership_three_subjects(self):
        recs = []
        for s in range(3):
            for i in range(2):
                recs.append(make_capture(f"I{s}{i}", subject=f"S{s:03d}",
                                         collection=i + 1, months=6 * i))
        pairs = generate_impostor_pairs(CaptureTable(recs),
                                        PairingConfig(max_impostor_probes=2,
                                                      base_seed=3))
        assert len(pairs) == 12   # 6 gallery rows x 2 probes
        for p in pairs:
            assert p.kind == IMPOSTOR
            assert p.gallery_subject != p.probe_subject
            assert p.eye == "L"
        by_gallery = {}
        for p in pairs:
            by_gallery.setdefault(p.gallery_image_id, []).append(p.probe_image_id)
        for gid, probes in by_gallery.items():
            assert len(probes) == len(set(probes)) == 2

    def test_append_after_leaves_earlier_draws_unchanged(self):
        rng = np.random.default_rng(13)
        base = random_capture_table(rng, n_subjects=8)
        cfg = PairingConfig(max_impostor_probes=4, base_seed=99)
        before = [p for p in generate_impostor_pairs(base, cfg) if p.eye == "L"]

        # appended subject sorts after every existing one and has only
        # right-eye images, so no left-eye pool changes
        extra = [make_capture(f"X{i}", subject="Zzz", eye="R", collection=i + 1,
                              months=6 * i) for i in range(3)]
        extended = CaptureTable(list(base.records) + extra)
        after = [p for p in generate_impostor_pairs(extended, cfg) if p.eye == "L"]
        assert [_pair_key(p) for p in before] == [_pair_key(p) for p in after]

    def test_independent_of_ingestion_order(self):
        rng = np.random.default_rng(14)
        table = random_capture_table(rng, n_subjects=9)
        shuffled_records = list(table.records)
        rng.shuffle(shuffled_records)
        cfg = PairingConfig(max_impostor_probes=3, base_seed=5)
        a = generate_impostor_pairs(table, cfg)
        b = generate_impostor_pairs(CaptureTable(shuffled_records), cfg)
        assert [_pair_key(p) for p in a] == [_pair_key(p) for p in b]

    def test_protocol_invariants(self):
        rng = np.random.default_rng(15)
        table = random_capture_table(rng, n_subjects=10)
        genuine = generate_genuine_pairs(table)
        impostor = generate_impostor_pairs(table, PairingConfig(base_seed=2))
        assert all(p.gap_T_months > 0 for p in genuine)
        assert all(p.gallery_subject != p.probe_subject for p in impostor)
        by_id = {r.image_id: r for r in table}
        for p in genuine + impostor:
            assert by_id[p.gallery_image_id].eye == by_id[p.probe_image_id].eye


class TestAttachScores:
    def _fixture(self):
        rng = np.random.default_rng(16)
        table = random_capture_table(rng, n_subjects=6)
        pairs = generate_genuine_pairs(table)
        assert pairs
        profile = MatcherProfile("m1", "higher", 0.0, 100.0, 50.0)
        scores = ScoreTable()
        for rec in pairs:
            scores.add(rec.gallery_image_id, rec.probe_image_id, "m1",
                       float(rng.uniform(1, 99)))
        return pairs, profile, scores

    def test_all_present_zero_incomplete(self):
        pairs, profile, scores = self._fixture()
        result = attach_scores(pairs, scores, [profile])
        assert result.incomplete == ()
        assert len(result.table) == len(pairs)

    def test_missing_cell_flags_pair(self):
        pairs, profile, scores = self._fixture()
        dropped = ScoreTable()
        skip = (pairs[0].gallery_image_id, pairs[0].probe_image_id)
        for gid, pid, matcher, score in scores:
            if (gid, pid) != skip:
                dropped.add(gid, pid, matcher, score)
        result = attach_scores(pairs, dropped, [profile])
        assert len(result.incomplete) == 1
        assert result.incomplete[0].gallery_image_id == skip[0]
        assert result.incomplete[0].missing_matchers == ("m1",)
        assert len(result.table) == len(pairs) - 1

    def test_out_of_range_score_raises(self):
        pairs, _, scores = self._fixture()
        hamming = MatcherProfile("m1", "lower", 0.0, 1.0, 0.42)
        with pytest.raises(ScoreRangeError, match="outside"):
            attach_scores(pairs, scores, [hamming])

import numpy as np
import pytest

from csmart.data import (
    REGIMENS,
    ClusterRecord,
    DataFormatError,
    EmbeddedAI,
    TrialDataset,
    consistency_indicator,
    load_csv,
    pathway_of,
    validate_design,
    write_csv,
)

from conftest import make_dataset


def rec(a1, r, a2, y=(1.0,), x=()):
    return ClusterRecord("c", x, a1, r, a2, y)


def test_regimen_order_is_fixed():
    assert REGIMENS == ((1, 1), (1, -1), (-1, 1), (-1, -1))


def test_responder_consistent_with_both_second_stage_options():
    r = rec(1, 1, None)
    assert consistency_indicator(r, EmbeddedAI(1, 1)) == 1
    assert consistency_indicator(r, EmbeddedAI(1, -1)) == 1
    assert consistency_indicator(r, EmbeddedAI(-1, 1)) == 0
    assert consistency_indicator(r, EmbeddedAI(-1, -1)) == 0


def test_nonresponder_consistent_with_one_regimen():
    r = rec(1, 0, 1)
    assert [consistency_indicator(r, ai) for ai in REGIMENS] == [1, 0, 0, 0]


@pytest.mark.parametrize("a1,r,a2,k", [(1, 1, None, 1), (1, 0, 1, 2), (1, 0, -1, 3),
                                       (-1, 1, None, 4), (-1, 0, 1, 5), (-1, 0, -1, 6)])
def test_pathway_enumeration(a1, r, a2, k):
    assert pathway_of(rec(a1, r, a2)) == k


def test_record_invariants():
    with pytest.raises(DataFormatError):
        rec(1, 1, 1)
    with pytest.raises(DataFormatError):
        rec(1, 0, None)
    with pytest.raises(DataFormatError):
        rec(2, 1, None)
    with pytest.raises(DataFormatError):
        rec(1, 1, None, y=())
    with pytest.raises(DataFormatError):
        rec(1, 1, None, y=(np.nan,))


def test_dataset_sizes(balanced_rows):
    ds = make_dataset(balanced_rows)
    assert ds.n == 6 and ds.N == 12 and ds.p == 0


def test_validate_design_passes_with_all_pathways(balanced_rows):
    rep = validate_design(make_dataset(balanced_rows))
    assert rep.ok
    assert list(rep.pathway_counts.values()) == [1] * 6


def test_validate_design_detects_missing_second_stage(balanced_rows):
    rows = [r for r in balanced_rows if not (r[0] == -1 and r[1] == 0)]
    rep = validate_design(make_dataset(rows))
    assert not rep.ok
    assert rep.problems


def test_validate_design_flags_responder_with_a2():
    class Loose:
        def __init__(self, a1, r, a2):
            self.a1, self.r, self.a2, self.y, self.x, self.cluster_id = a1, r, a2, np.ones(2), np.zeros(0), "z"

        @property
        def m(self):
            return 2

    rep = validate_design([Loose(1, 1, 1)])
    assert not rep.ok


def test_csv_round_trip(tmp_path, rng):
    from csmart.oracles import random_dataset

    ds = random_dataset(rng, 9, p=2)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = load_csv(path)
    assert back.n == ds.n
    assert all(a == b for a, b in zip(back.clusters, ds.clusters))
    assert back.covariate_names == ds.covariate_names


def test_two_cluster_file_and_na(tmp_path):
    path = tmp_path / "two.csv"
    path.write_text("cluster_id,member_id,a1,r,a2,y\n"
                    "A,1,1,1,NA,3.0\nA,2,1,1,NA,4.0\nB,1,-1,0,1,5.0\n")
    ds = load_csv(path)
    assert ds.n == 2
    assert ds.clusters[0].a2 is None
    assert ds.clusters[1].a2 == 1


def test_na_for_nonresponder_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("cluster_id,member_id,a1,r,a2,y\nB,1,-1,0,NA,5.0\n")
    with pytest.raises(DataFormatError):
        load_csv(path)


def test_missing_column_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("cluster_id,member_id,a1,r,y\nB,1,-1,1,5.0\n")
    with pytest.raises(DataFormatError):
        load_csv(path)


def test_empty_dataset_rejected():
    with pytest.raises(DataFormatError):
        TrialDataset(())

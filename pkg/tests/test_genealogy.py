import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eicoal.genealogy import (
    COALESCENT,
    GRID,
    SAMPLING,
    EventTimeline,
    NewickError,
    TimelineError,
    TreeValidationError,
    events_from_records,
    extract_events,
    insert_grid,
    interval_lengths,
    parse_newick,
    read_newick,
    tree_from_times,
)


def test_isochronous_three_tips():
    tl = extract_events(parse_newick("((A:1,B:1):1,C:2);"))
    assert list(tl.times) == [0.0, 1.0, 2.0]
    assert list(tl.types) == [SAMPLING, COALESCENT, COALESCENT]
    assert list(tl.samples_added) == [3, 0, 0]
    assert list(tl.k) == [3, 2, 1]


def test_heterochronous_tips_enter_at_their_dates():
    tree = parse_newick("((A:1,B:1):1,C:1.5);")
    assert tree.tip_offsets() == {"A": 0.0, "B": 0.0, "C": 0.5}
    tl = extract_events(tree)
    assert list(tl.times) == [0.0, 0.5, 1.0, 2.0]
    assert list(tl.types) == [SAMPLING, SAMPLING, COALESCENT, COALESCENT]
    assert list(tl.k) == [2, 3, 2, 1]


def test_comments_quotes_and_whitespace():
    tree = parse_newick(" ( 'tip one':1.0[&rate=1] , B : 1e0 ) root ; ")
    assert sorted(tree.tip_offsets()) == ["B", "tip one"]


@pytest.mark.parametrize(
    "text",
    ["((A:1,B:1):1,C:2)", "((A:1,B:1:1,C:2);", "((A:1,B:x):1,C:2);", "(A:1,B:1);extra"],
)
def test_malformed_newick(text):
    with pytest.raises(NewickError) as info:
        parse_newick(text)
    assert info.value.position >= 0


def test_polytomy_rejected():
    with pytest.raises(TreeValidationError):
        parse_newick("(A:1,B:1,C:1);")


def test_negative_branch_rejected():
    with pytest.raises(TreeValidationError):
        parse_newick("((A:1,B:-1):1,C:2);")


def test_missing_branch_length_rejected():
    with pytest.raises(TreeValidationError):
        parse_newick("((A,B):1,C:2);")


def test_simultaneous_coalescences_rejected():
    with pytest.raises(TreeValidationError):
        extract_events(parse_newick("((A:1,B:1):1,(C:1,D:1):1);"))


def test_coalescence_at_sampling_time_rejected():
    with pytest.raises(TreeValidationError):
        extract_events(parse_newick("((A:1,B:1):1,C:1);"))


def test_grid_insertion_idempotent_and_k_unchanged():
    tl = extract_events(parse_newick("((A:3,B:3):10,C:13);"))
    g = insert_grid(tl, 5.0)
    assert list(g.times) == [0.0, 3.0, 5.0, 10.0, 13.0]
    assert list(g.types) == [SAMPLING, COALESCENT, GRID, GRID, COALESCENT]
    assert list(g.k) == [3, 2, 2, 2, 1]
    assert np.array_equal(insert_grid(g, 5.0).times, g.times)
    assert np.array_equal(g.without_grid().times, tl.times)


def test_grid_skips_points_near_events():
    tl = extract_events(parse_newick("((A:5,B:5):1,C:6);"))
    assert GRID not in insert_grid(tl, 5.0).types


def test_newick_round_trip(tmp_path):
    tree = parse_newick("((A:1.25,B:1.25):0.5,(C:0.75,D:1):1);")
    path = tmp_path / "t.nwk"
    path.write_text(tree.to_newick() + "\n")
    again = read_newick(path)
    assert again.tip_offsets() == tree.tip_offsets()
    assert np.allclose(np.sort(again.node_times()), np.sort(tree.node_times()))


def test_timeline_csv_round_trip():
    tl = insert_grid(extract_events(parse_newick("((A:3,B:3):10,C:12);")), 4.0)
    text = tl.to_csv()
    assert text.splitlines()[0] == "time,type,samples_added,k"
    back = EventTimeline.from_csv(text)
    for name in ("times", "types", "samples_added", "k"):
        assert np.array_equal(getattr(back, name), getattr(tl, name))


def test_records_and_lineage_errors():
    tl = events_from_records([(0, "sampling", 2), (1.5, "coalescent", 0)])
    assert tl.tmrca == 1.5 and tl.n_tips == 2 and tl.n_coalescent == 1
    assert np.allclose(interval_lengths(tl), [1.5])
    with pytest.raises(TimelineError):
        events_from_records([(0, "sampling", 1), (1, "coalescent", 0)])


def _random_tree(rng, n):
    """Random coalescent-style tree with distinct node times."""
    times = list(rng.uniform(0, 2, n))
    times[int(rng.integers(n))] = 0.0
    active = list(range(n))
    parent = [-1] * n
    node_t = list(times)
    t = max(times)
    while len(active) > 1:
        i, j = rng.choice(len(active), 2, replace=False)
        t += rng.uniform(0.1, 1.0)
        new = len(parent)
        parent.append(-1)
        node_t.append(t)
        parent[active[i]] = new
        parent[active[j]] = new
        active = [a for idx, a in enumerate(active) if idx not in (i, j)] + [new]
    labels = [f"t{i}" for i in range(n)] + [None] * (len(parent) - n)
    return tree_from_times(parent, node_t, labels)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 25), st.integers(0, 2**32 - 1), st.floats(0.3, 3.0))
def test_timeline_properties(n, seed, width):
    tree = _random_tree(np.random.default_rng(seed), n)
    tl = extract_events(tree)
    assert tl.n_tips == n
    assert tl.n_coalescent == n - 1
    assert tl.k[-1] == 1 and np.all(tl.k >= 1)
    assert np.all(np.diff(tl.times) > 0)
    assert np.isclose(tl.tmrca, tree.root_depth)
    g = insert_grid(tl, width)
    assert np.array_equal(g.without_grid().times, tl.times)
    assert np.all(g.k[g.types == GRID] >= 1)
    # Newick text reproduces the same timeline
    again = extract_events(parse_newick(tree.to_newick()))
    assert np.allclose(again.times, tl.times)
    assert np.array_equal(again.types, tl.types)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfa.errors import ConfigError, ContractError, FormatError, ShapeError
from cfa.memory import Exemplar, ReplayMemory, class_mean, populate, snapshot_for_amalgamation
from cfa.nn import Network, init_parameters
from cfa.serialization import save_arrays


def ex(class_id, distance, task_id=None, dim=2):
    return Exemplar(
        input=np.full(dim, float(class_id)),
        task_id=class_id // 2 + 1 if task_id is None else task_id,
        class_id=class_id,
        teacher_logits=np.zeros(2),
        distance_to_class_mean=distance,
    )


class Oracle:
    """Flat-list restatement of the selection rule, used to cross-check ReplayMemory."""

    def __init__(self, policy, budget):
        self.policy, self.budget = policy, budget
        self.items = []  # (distance, order, class)
        self.classes, self.tasks = [], []
        self.order = 0

    def insert(self, cls, task, d):
        if cls not in self.classes:
            self.classes.append(cls)
        if task not in self.tasks:
            self.tasks.append(task)
        cap = self.budget if self.policy == "fixed" else self.budget * len(self.tasks)
        item = (d, self.order, cls)
        self.order += 1
        if len(self.items) < cap:
            self.items.append(item)
            return True
        share = cap // len(self.classes)
        count = {c: sum(1 for i in self.items if i[2] == c) for c in self.classes}
        if count[cls] < share:
            victims = [i for i in self.items if count[i[2]] > share]
            self.items.remove(max(victims))
            self.items.append(item)
            return True
        scope = [i for i in self.items if i[2] == cls] or self.items
        worst = max(scope)
        if d < worst[0]:
            self.items.remove(worst)
            self.items.append(item)
            return True
        return False


@pytest.mark.parametrize("policy, budget", [("fixed", 7), ("fixed", 20), ("grow", 5)])
def test_matches_bruteforce_oracle(policy, budget):
    rng = np.random.default_rng(budget)
    mem, oracle = ReplayMemory(policy, budget), Oracle(policy, budget)
    for step in range(600):
        task = min(1 + step // 150, 4)
        cls = 2 * (task - 1) + int(rng.integers(2))
        d = float(np.round(rng.uniform(0, 5), 1))  # rounding forces ties
        assert mem.try_insert(ex(cls, d, task)) == oracle.insert(cls, task, d)
        assert sorted(e.order for e in mem.entries) == sorted(i[1] for i in oracle.items)


def test_fixed_never_exceeds_budget_and_keeps_closest():
    mem = ReplayMemory("fixed", 3)
    for d in [5.0, 1.0, 4.0, 2.0, 3.0, 0.5]:
        mem.try_insert(ex(0, d))
    assert len(mem) == 3
    assert [e.distance_to_class_mean for e in mem.entries] == [0.5, 1.0, 2.0]


def test_ties_keep_the_older_exemplar():
    mem = ReplayMemory("fixed", 2)
    mem.try_insert(ex(0, 1.0))
    mem.try_insert(ex(0, 2.0))
    assert not mem.try_insert(ex(0, 2.0))
    assert [e.order for e in mem.entries] == [0, 1]


def test_new_class_claims_fair_share():
    mem = ReplayMemory("fixed", 4)
    for d in [0.1, 0.2, 0.3, 0.4]:
        mem.try_insert(ex(0, d))
    # a new class gets room even though its distances are larger
    assert mem.try_insert(ex(1, 9.0))
    assert mem.try_insert(ex(1, 8.0))
    assert mem.class_counts() == {0: 2, 1: 2}
    assert mem.max_distance(0) == 0.2
    assert not mem.try_insert(ex(1, 9.5))


def test_grow_capacity_scales_with_tasks():
    mem = ReplayMemory("grow", 3)
    for d in range(5):
        mem.try_insert(ex(0, float(d), task_id=1))
    assert len(mem) == 3 and mem.capacity == 3
    for d in range(5):
        mem.try_insert(ex(2, float(d), task_id=2))
    assert len(mem) == 6 and mem.capacity == 6


def test_entries_sorted_within_class(rng):
    mem = ReplayMemory("fixed", 30)
    for _ in range(200):
        mem.try_insert(ex(int(rng.integers(3)), float(rng.uniform(0, 10))))
    for c in (0, 1, 2):
        d = [e.distance_to_class_mean for e in mem.entries if e.class_id == c]
        assert d == sorted(d)


def test_distance_from_class_mean():
    mem = ReplayMemory("fixed", 5)
    cand = ex(0, 0.0)
    cand.teacher_logits = np.array([3.0, 4.0])
    mem.try_insert(cand, class_mean=np.zeros(2))
    assert mem.entries[0].distance_to_class_mean == 5.0


def test_errors():
    with pytest.raises(ConfigError):
        ReplayMemory("lru", 10)
    with pytest.raises(ConfigError):
        ReplayMemory("fixed", 0)
    mem = ReplayMemory("fixed", 5)
    with pytest.raises(ContractError):
        mem.try_insert(ex(0, -1.0))
    with pytest.raises(ContractError):
        mem.snapshot()
    mem.try_insert(ex(0, 1.0))
    with pytest.raises(ShapeError):
        mem.try_insert(ex(0, 1.0, dim=3))


def test_snapshot_is_input_only_copy():
    mem = ReplayMemory("fixed", 5)
    for c in (0, 1):
        mem.try_insert(ex(c, 1.0))
    snap = snapshot_for_amalgamation(mem)
    assert snap.shape == (2, 2)
    snap[:] = -1
    assert mem.entries[0].input[0] == 0.0
    shuffled = mem.snapshot(seed=3)
    assert sorted(shuffled[:, 0]) == [0.0, 1.0]


def test_persistence_roundtrip_bit_exact(tmp_path, rng):
    mem = ReplayMemory("grow", 4)
    for i in range(30):
        e = ex(int(rng.integers(4)), float(rng.uniform(0, 3)))
        e.input = rng.normal(size=2)
        e.teacher_logits = rng.normal(size=2)
        mem.try_insert(e)
    mem.save(tmp_path / "mem")
    loaded = ReplayMemory.load(tmp_path / "mem")
    assert (loaded.policy, loaded.budget, loaded.tasks) == (mem.policy, mem.budget, mem.tasks)
    assert len(loaded) == len(mem)
    for a, b in zip(mem.entries, loaded.entries):
        assert a.input.tobytes() == b.input.tobytes()
        assert a.teacher_logits.tobytes() == b.teacher_logits.tobytes()
        assert (a.distance_to_class_mean, a.order, a.class_id, a.task_id) == (
            b.distance_to_class_mean, b.order, b.class_id, b.task_id)
    # the loaded memory continues exactly like the original
    probe = ex(0, 0.01)
    assert loaded.try_insert(probe) == mem.try_insert(ex(0, 0.01))
    save_arrays(tmp_path / "other", {"x": np.zeros(1)}, kind="network")
    with pytest.raises(FormatError):
        ReplayMemory.load(tmp_path / "other")


def test_populate_uses_teacher_logits(rng):
    teacher = init_parameters(Network(3, [4, 5], 6, 5, 4), 0)
    x = rng.normal(size=(40, 3))
    y = np.where(rng.uniform(size=40) < 0.5, 4, 5)
    mem = ReplayMemory("fixed", 10)
    assert populate(mem, teacher, 1, x, y) >= 10
    assert len(mem) == 10
    means = {c: class_mean(teacher, x[y == c]) for c in (4, 5)}
    for e in mem.entries:
        assert e.teacher_logits.shape == (2,)
        assert e.distance_to_class_mean == pytest.approx(np.linalg.norm(e.teacher_logits - means[e.class_id]))
    # the kept exemplars are the closest ones of their class
    for c in (4, 5):
        kept = [e.distance_to_class_mean for e in mem.entries if e.class_id == c]
        all_d = np.sort(np.linalg.norm(teacher.logits(x[y == c]) - means[c], axis=1))
        np.testing.assert_allclose(kept, all_d[: len(kept)])


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["fixed", "grow"]),
    st.integers(1, 12),
    st.lists(st.tuples(st.integers(0, 5), st.floats(0, 10, allow_nan=False)), max_size=80),
)
def test_capacity_and_order_invariants(policy, budget, inserts):
    mem = ReplayMemory(policy, budget)
    for cls, d in inserts:
        mem.try_insert(ex(cls, d))
        assert len(mem) <= mem.capacity
        for c in mem.class_counts():
            ds = [e.distance_to_class_mean for e in mem.entries if e.class_id == c]
            assert ds == sorted(ds)

import numpy as np
import pytest

from slacksched.baselines import (EDF, FCFS, RM, SRPT, IdleAlways, MinSlack, RandomPolicy, WeightedSlack,
                                  default_quantizer, make_policy)
from slacksched.simcore import JobView, Snapshot, run_episode
from slacksched.taskmodel import TaskSpec
from slacksched.urgency import QuantizerConfig


def snap(cores=1):
    #            id rem wcet per dl rel last release
    jobs = (JobView(1, 5, 5, 20, 20, 20, None, 0),
            JobView(2, 1, 2, 10, 12, 10, None, 2),
            JobView(3, 3, 3, 8, 9, 8, None, 1))
    return Snapshot(1, jobs, cores)


@pytest.mark.parametrize("policy,expect", [
    (EDF(), (3,)), (RM(), (3,)), (SRPT(), (2,)), (FCFS(), (1,)), (MinSlack(), (3,)), (IdleAlways(), (None,)),
])
def test_rules_pick_expected_job(policy, expect):
    assert policy(snap()) == expect


def test_rules_fill_cores_and_break_ties_by_id():
    assert EDF()(snap(cores=2)) == (3, 2)
    tie = Snapshot(0, (JobView(2, 1, 1, 5, 5, 5, None), JobView(1, 1, 1, 5, 5, 5, None)), 1)
    assert EDF()(tie) == (1,)


def test_weighted_slack_normalises_and_ranks():
    q = QuantizerConfig(Q=8, delta=2.0)
    w = WeightedSlack(2.0, 2.0, q)
    assert (w.alpha, w.beta) == (0.5, 0.5)
    assert w.priority(0, 0) == 1.0
    # job 2: slack 8 -> bin 4, rem 1; job 3: slack 5 -> bin 2, rem 3; job 1: slack 14 -> bin 7, rem 5
    assert WeightedSlack(1.0, 0.0, q).ranked(snap()) == [3, 2, 1]
    assert WeightedSlack(0.0, 1.0, q).ranked(snap()) == [2, 3, 1]
    with pytest.raises(ValueError):
        WeightedSlack(0.0, 0.0, q)


def test_random_policy_is_seeded_and_can_idle():
    a = [RandomPolicy(4)(snap(2)) for _ in range(50)]
    b = [RandomPolicy(4)(snap(2)) for _ in range(50)]
    assert a == b
    picks = [RandomPolicy(s)(snap())[0] for s in range(200)]
    assert None in picks and set(picks) - {None} == {1, 2, 3}


def test_make_policy_parses_specs():
    tasks = [TaskSpec(1, 10, 2, 10)]
    assert repr(make_policy("EDF")) == "edf"
    assert isinstance(make_policy("random:3"), RandomPolicy)
    w = make_policy("wslack:0.6,0.4", tasks)
    assert w.alpha == pytest.approx(0.6) and w.quantizer.delta == pytest.approx(10 / 128)
    for bad in ("nope", "wslack:x", "edf:1"):
        with pytest.raises(ValueError):
            make_policy(bad, tasks)


def test_edf_dominates_on_overload():
    tasks = [TaskSpec(1, 8, 3, 8), TaskSpec(2, 5, 2, 5), TaskSpec(3, 6, 2, 6)]
    edf = run_episode(tasks, EDF(), 240)[0].compliance_rate
    rnd = np.mean([run_episode(tasks, RandomPolicy(s), 240)[0].compliance_rate for s in range(5)])
    assert edf > rnd
    assert default_quantizer(tasks, Q=16).delta == 0.5

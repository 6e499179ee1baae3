from mstkd.benchmark import ABLATIONS, SeedResult, format_results, verdicts


def _result(seed, full, others=0.5, dice_only=0.5, teacher=0.9, untrained=0.1):
    wt = {"full": full, "dice_only": dice_only, **{a: others for a in ABLATIONS}}
    return SeedResult(seed, teacher, 60.0, untrained, wt=wt, tc=dict(wt), et=dict(wt), seconds={})


def test_majority_vote_over_seeds():
    good = [_result(0, 0.6), _result(1, 0.6), _result(2, 0.4)]
    v = verdicts(good)
    assert all(v.values())
    bad = [_result(0, 0.6), _result(1, 0.4), _result(2, 0.4)]
    v = verdicts(bad)
    assert not v["full_beats_dice_only"] and not any(v[f"full_at_least_{a}"] for a in ABLATIONS)


def test_ties_count_for_ablations_but_not_for_the_baseline():
    tied = [_result(s, 0.5) for s in range(3)]
    v = verdicts(tied)
    assert not v["full_beats_dice_only"]
    assert all(v[f"full_at_least_{a}"] for a in ABLATIONS)


def test_absolute_claims_need_every_seed():
    rs = [_result(0, 0.6), _result(1, 0.6, teacher=0.69), _result(2, 0.6, dice_only=0.25)]
    v = verdicts(rs)
    assert not v["teacher_wt_at_least_0.7"] and not v["trained_beats_untrained_by_0.2"]


def test_result_round_trip_and_table():
    r = _result(3, 0.7)
    assert SeedResult.from_json(r.to_json()) == r
    table = format_results([r]).splitlines()
    assert table[0].startswith("| seed | teacher WT | untrained | full")
    assert table[2].startswith("| 3 | 0.9000 | 0.1000 | 0.7000")

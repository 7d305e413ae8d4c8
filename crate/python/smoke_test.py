"""Quick end-to-end check of the Python bindings."""

import json

import pact


def lattices():
    a = pact.Lattice.set_union([1, 2])
    b = pact.Lattice.set_union([2, 3])
    ab = a.merge(b)
    assert ab == b | a
    assert a.leq(ab) and not ab.leq(a)
    assert ab.merge(ab) == ab
    assert a.bottom().is_bottom()
    assert pact.Lattice.from_json(ab.to_json()) == ab

    m = pact.Lattice.map_union([("x", pact.Lattice.max_int(3)), ("x", pact.Lattice.max_int(5))], pact.Lattice.max_int(0))
    assert m.shape == "MapUnion<MaxInt>"
    try:
        a.merge(pact.Lattice.max_int(1))
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched shapes merged")


def analysis():
    assert "covid_tracker" in pact.pattern_names()
    prog = pact.Program.pattern("covid_tracker")
    report = prog.analyze()
    assert report["handlers"]["vaccinate"]["coordination"] == "NeedsCoordination"
    assert report["handlers"]["add_contact"]["coordination"] == "CoordinationFree"
    again = pact.Program.from_json(prog.to_json())
    assert again.handlers == prog.handlers


def simulation():
    scenario = pact.pattern_scenario("covid_tracker", 1)
    state, trace = pact.simulate(scenario)
    state2, trace2 = pact.simulate(scenario)
    assert trace == trace2 and state == state2
    assert all(n == 1 for n in state["responses"].values())

    sim = pact.Simulation(scenario)
    while not sim.is_quiescent():
        sim.step()
    assert sim.final_state() == state
    assert sim.trace_jsonl() == trace

    short = json.loads(scenario)
    short["max_ticks"] = 1
    try:
        pact.Simulation(json.dumps(short)).run()
    except pact.NoQuiescence:
        pass
    else:
        raise AssertionError("expected NoQuiescence")


def planning():
    plan = pact.plan_pattern("covid_tracker")
    assert plan["assignment"]["likelihood"] == "gpu"
    cpu_only = json.dumps([{"name": "cpu", "price": 0.004, "features": [], "capacity": 1.0}])
    try:
        pact.plan_pattern("covid_tracker", cpu_only)
    except pact.Infeasible as e:
        request = e.args[1]
        assert request["violations"][0]["constraint"] == "feature"
    else:
        raise AssertionError("expected Infeasible")


if __name__ == "__main__":
    lattices()
    analysis()
    simulation()
    planning()
    print("smoke test passed")

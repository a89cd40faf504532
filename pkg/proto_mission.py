import time

import numpy as np

from agrisim import mission as ms
from agrisim.errors import ContractViolationError, StructuralError
from agrisim.fieldgen import FieldSpec, TerrainParams, generate

# 1. p=0 exactly once, FIFO
ch = ms.LossyChannel(p=0.0, seed=1)
for i in range(1, 6):
    ms.send(ch, ms.Request(i, "work", i * 10), 0.1 * i, "uav")
got = ms.poll(ch, 2.0, "ugv")
reqs = [m.id for m in got if isinstance(m, ms.Request)]
print("p0 fifo:", reqs, "expect [1..5]")
assert reqs == [1, 2, 3, 4, 5]
again = ms.poll(ch, 10.0, "ugv")
print("p0 redelivery after ack pending:", [m.id for m in again if isinstance(m, ms.Request)], "expect []")
assert not [m for m in again if isinstance(m, ms.Request)]

# 2. p=1 finite deadline -> timeout
ch = ms.LossyChannel(p=1.0, seed=2, deadline=5.0)
ms.send(ch, ms.Request(1, "work", None), 0.0, "uav")
print("p1 before deadline:", ms.timed_out(ch, 4.9, "uav"), "expect []")
out = ms.timed_out(ch, 5.2, "uav")
print("p1 after deadline:", out, "expect [1]")
assert out == [1]

# 3. p=0.5 effect once (and for a grid of p/seeds with no deadline)
worst = 0.0
for p in (0.0, 0.3, 0.5, 0.6):
    for seed in range(50):
        ch = ms.LossyChannel(p=p, seed=seed, deadline=None)
        ms.send(ch, ms.Request(1, "work", None), 0.0, "uav")
        effects = 0
        t = 0.0
        acked = False
        while t < 200.0:
            t += 0.5
            effects += sum(isinstance(m, ms.Request) for m in ms.poll(ch, t, "ugv"))
            if effects and not acked:
                ms.send(ch, ms.Status(1, "received"), t, "ugv")
                acked = True
        assert effects == 1, (p, seed, effects)
print("effect-once grid ok (200 channel-seeds)")

# 4. pose latest-wins
ch = ms.LossyChannel(p=0.0, seed=3)
for k in range(5):
    ms.send(ch, ms.UavPose((float(k), 0.0, 4.0), float(k)), float(k), "uav")
got = ms.poll(ch, 10.0, "ugv")
poses = [m for m in got if isinstance(m, ms.UavPose)]
print("poses collapsed:", len(poses), "stamp", poses[0].stamp, "expect 1 / 4.0")
assert len(poses) == 1 and poses[0].stamp == 4.0

# 5. task tree semantics
calls = []
t1 = ms.Task("a", fn=lambda t, dt: calls.append("a") or ms.SUCCEEDED)
t2 = ms.Task("b", fn=lambda t, dt: calls.append("b") or ms.SUCCEEDED)
root = ms.Task("seq", "sequence", children=[t1, t2])
ms.validate_tree(root)
st = ms.tick(root, 0.1)
print("sequence:", st, calls, "expect succeeded ['a','b']")
assert st == ms.SUCCEEDED and calls == ["a", "b"]

mon = ms.Task("monitor", fn=lambda t, dt: ms.FAILED, interrupt_priority=5)
work = ms.Task("work", fn=lambda t, dt: ms.RUNNING, interrupt_priority=0)
par = ms.Task("par", "parallel", children=[work, mon])
ms.tick(par, 0.1)
print("parallel interrupt:", par.state, work.state, mon.state,
      "expect failed interrupted failed")
assert par.state == ms.FAILED and work.state == ms.INTERRUPTED

bad = ms.Task("leaf-with-kids", fn=lambda t, dt: ms.RUNNING,
              children=[ms.Task("x", fn=lambda t, dt: ms.RUNNING)])
try:
    ms.validate_tree(bad)
    print("BAD: structural error not raised")
except StructuralError as e:
    print("structural:", e)

done = ms.Task("d", fn=lambda t, dt: ms.SUCCEEDED)
ms.tick(done, 0.1)
try:
    ms._transition(done, ms.RUNNING)
    print("BAD: lifecycle violation not raised")
except ContractViolationError as e:
    print("lifecycle:", e)

# 6. missions on a shared field
spec = FieldSpec(extent=(30.0, 30.0), weed_density=0.4,
                 terrain=TerrainParams(0.0, 0.2, 3.0), seed=11)
truth = generate(spec)
print("field:", len(truth.plants), "plants,",
      sum(p.species != "crop" for p in truth.plants), "weeds")

t0 = time.time()
ch = ms.LossyChannel(p=0.0, seed=0)
res = ms.coordinated_mission(truth, [ms.UavConfig(aoi_count=1)],
                             [ms.UgvConfig()], ch, seed=0)
el = time.time() - t0
n_req = sum(e.event == "request_sent" for e in res.events)
n_recv = sum(e.event == "request_received" for e in res.events)
n_st_recv = sum(e.event == "status_received" and "received" in e.detail
                for e in res.events)
n_st_succ = sum(e.event == "status_received" and "succeeded" in e.detail
                for e in res.events)
print(f"single-aoi p0: state={res.state} req={n_req} recv={n_recv} "
      f"st_recv={n_st_recv} st_succ={n_st_succ} dur={res.duration:.1f} "
      f"({el:.1f}s wall)")
assert res.state == "succeeded"
assert (n_req, n_recv, n_st_recv, n_st_succ) == (1, 1, 1, 1)

# UGV disabled
ch = ms.LossyChannel(p=0.0, seed=0)
res = ms.coordinated_mission(truth, [ms.UavConfig(aoi_count=1)], [], ch, seed=0)
print("no-ugv:", res.state, "treated:", res.treated, "expect failed {}")
assert res.state == "failed" and not res.treated

# demo mission sweep: 1 UAV, 1 UGV, 3 AoIs, p=0.3
t0 = time.time()
ok = 0
for seed in range(20):
    ch = ms.LossyChannel(p=0.3, seed=seed)
    res = ms.coordinated_mission(truth, [ms.UavConfig()], [ms.UgvConfig()],
                                 ch, seed=seed)
    good = res.state == "succeeded" and set(res.treated) == {1, 2, 3}
    ok += good
    if not good:
        print("  seed", seed, res.state, res.treated, res.duration)
print(f"demo sweep: {ok}/20 succeeded with all areas treated "
      f"({time.time() - t0:.1f}s)")

# determinism
ch1 = ms.LossyChannel(p=0.3, seed=7)
r1 = ms.coordinated_mission(truth, [ms.UavConfig()], [ms.UgvConfig()], ch1, seed=7)
ch2 = ms.LossyChannel(p=0.3, seed=7)
r2 = ms.coordinated_mission(truth, [ms.UavConfig()], [ms.UgvConfig()], ch2, seed=7)
print("deterministic:", r1.events == r2.events and r1.treated == r2.treated)

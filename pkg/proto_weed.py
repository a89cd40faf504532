import numpy as np
import agrisim.weedops as w
from agrisim import fieldgen
from agrisim.errors import NotReachableError, OutOfReachError

# nbc worked examples
post = w.nbc_posterior({"weed": 3})
print(f"nbc weed:3 -> {post:.6f} expect {0.9**3/(0.9**3+0.1**3):.6f}")
print("nbc 1/1 ->", w.nbc_posterior({"weed": 1, "crop": 1}),
      "validated:", w.nbc_validate(w.TrackedWeed(0, (1, 0), 0.0, 0.01,
                                                 {"weed": 1, "crop": 1})))
print("crop:5 posterior", w.nbc_posterior({"crop": 5}))

# select_tool
bank = w.default_bank()
print("0.003 ->", w.select_tool(0.003, bank), "| 0.012 ->",
      w.select_tool(0.012, bank), "| 0.005 ->", w.select_tool(0.005, bank))

# trigger worked example: gap 0.5, v 0.2, L 0.1 -> fire 2.4
single = w.ToolBank((w.ToolRank("stamp", 0.5, (-0.1, 0.0, 0.1), 0.005),), 0.1)
weed = w.TrackedWeed(1, (0.0, 0.0), 0.0, 0.003, {"weed": 2})
cmd = w.predict_trigger(weed, 0.2, single)
print(f"fire time {cmd.fire_time:.6f} expect 2.4; tool {cmd.tool_index} lat {cmd.lateral}")

# piecewise: 0.1 m/s for 1 s then 0.3; gap 0.5 -> t_cross = 1 + 0.4/0.3, fire - L
cmd2 = w.predict_trigger(weed, ((1.0, 0.1), (1e9, 0.3)), single)
print(f"piecewise fire {cmd2.fire_time:.6f} expect {1 + 0.4/0.3 - 0.1:.6f}")

# behind the line
try:
    w.predict_trigger(w.TrackedWeed(2, (-0.51, 0.0), 0.0, 0.003, {"weed": 1}), 0.2, single)
    print("behind: NO RAISE (bad)")
except NotReachableError as e:
    print("behind raises NotReachable")

# lateral out of reach
try:
    w.predict_trigger(w.TrackedWeed(3, (0.0, 0.25), 0.0, 0.003, {"weed": 1}), 0.2, single)
    print("out of reach: NO RAISE (bad)")
except OutOfReachError:
    print("lateral raises OutOfReach")

# --- perfect-case simulate_treatment
spec = fieldgen.FieldSpec(extent=(8.0, 3.0), row_spacing=0.5, weed_density=1.0,
                          seed=11)
truth = fieldgen.generate(spec)
run = w.RobotRun(y_track=1.5, x_start=-1.0, speed=0.2, roughness=0.0, seed=0)
path = fieldgen.CameraPath(np.array([[-1.0, 1.5], [9.5, 1.5]]), speed=run.speed)
det = fieldgen.DetectorParams(footprint_radius=0.6, confusion=0.0,
                              position_sigma=0.0, radius_sigma=0.0, seed=5)
events = fieldgen.simulate_detections(truth, path, det)
print("events:", len(events), "weeds in field:", len(truth.weeds()))
m = w.simulate_treatment(truth, events, run)
print("attempted", m.attempted, "treated", m.treated,
      "rates", {k: m.rate(k) for k in ("stamp", "spray")},
      "casualties", m.crop_casualties,
      "oor", m.skipped_out_of_reach, "nr", m.skipped_not_reachable)

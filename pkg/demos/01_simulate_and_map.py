"""Simulate the rectangle run in the lab and map it with the Gauss-Newton matcher.

Writes the record, the estimate and the PGM map into ./demo_out.
"""
from pathlib import Path

from laserslam.cli import run_pipeline, write_estimate_csv
from laserslam.evaluation import evaluate
from laserslam.gridmap import export_pgm
from laserslam.sim import ScenarioConfig, simulate_scenario, write_record

out = Path("demo_out")
out.mkdir(exist_ok=True)

rec = simulate_scenario(ScenarioConfig("rect_nominal", seed=1, sigma=0.02))
write_record(rec, out / "rect_nominal.jsonl")
print(f"{len(rec.scans)} scans, {len(rec.imu)} imu samples, {rec.ground_truth.duration:.1f} s of truth")

est, slam = run_pipeline(rec, "hector")
write_estimate_csv(est, out / "rect_nominal_hector.csv")
pgm, meta = export_pgm(slam.final_map(), out / "rect_nominal_hector.pgm")

m, _ = evaluate(rec.ground_truth.to_2d(), est)
print(f"RMSE {m.rmse_cm:.2f} cm over {m.pairs} poses, yaw RMSE {m.yaw_rmse_deg:.2f} deg")
print(f"map written to {pgm} ({meta.name})")

import time
from xmodseg.experiments import run_ablation, ablation_table
t0 = time.time()
scores = run_ablation("/tmp/benchdata", "/tmp/seprun2", ["joint-v2", "joint-v3", "joint-v3-cr"], [0, 1], steps=450)
print(ablation_table(scores, ["m1", "m2"]))
for s in scores:
    print(s.variant, s.seed, {k: round(v, 2) for k, v in s.dice_by_modality.items()})
print("elapsed:", round(time.time() - t0, 1))

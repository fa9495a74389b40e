"""Threshold calibration and AND-rule fusion for two dissimilar matchers.

One similarity matcher and one distance matcher score the same comparison
pairs. Each threshold is swept to the loosest operating point holding
FMR <= 0.1%, the DET trade-off is summarized, and the security gain from
requiring both matchers to accept is quantified.
"""

from longmatch import (
    ComparisonTable, DistSpec, MatcherSim, PairingConfig, SynthConfig,
    attach_scores, calibrate_threshold, det_curve, fuse_and_rule,
    generate_genuine_pairs, generate_impostor_pairs, generate_longitudinal,
)

sims = (
    MatcherSim(name="simileye", orientation="higher",
               beta={"intercept": 430.0, "T": -0.3, "Q_gallery": 1.5,
                     "Q_probe": 1.2, "DC": 150.0},
               Sigma=((60.0**2, 0.0), (0.0, 0.5**2)), sigma2=50.0**2,
               impostor=DistSpec("normal", 250.0, 80.0)),
    MatcherSim(name="hammix", orientation="lower",
               beta={"intercept": 0.30, "T": 0.0003, "Q_probe": -0.0004,
                     "DC": -0.09},
               Sigma=((0.03**2, 0.0), (0.0, 0.0002**2)), sigma2=0.035**2,
               impostor=DistSpec("normal", 0.45, 0.040)),
)
cfg = SynthConfig(n_subjects=200, images_per_eye_per_session=2,
                  attrition_rate=0.10, matchers=sims,
                  pairing=PairingConfig(max_impostor_probes=8, base_seed=3),
                  seed=813)
result = generate_longitudinal(cfg)
profiles = {p.name: p for p in result.profiles}

genuine = attach_scores(generate_genuine_pairs(result.captures),
                        result.scores, result.profiles).table
impostor = attach_scores(generate_impostor_pairs(result.captures, cfg.pairing),
                         result.scores, result.profiles).table
print(f"{len(genuine)} genuine / {len(impostor)} impostor comparisons\n")

thresholds = {}
for name, profile in profiles.items():
    cal = calibrate_threshold(genuine, impostor, profile, target_fmr=0.001)
    thresholds[name] = cal.threshold
    curve = det_curve(genuine, impostor, profile)
    print(f"{name:9s} threshold {cal.threshold:10.4f}  "
          f"FMR {cal.achieved_fmr:.4%}  FNMR {cal.achieved_fnmr:.4%}  "
          f"EER {curve.eer:.4%}  AUC {curve.auc:.5f}")

combined = ComparisonTable.concat([genuine, impostor])
fusion = fuse_and_rule(combined, profiles["simileye"], thresholds["simileye"],
                       profiles["hammix"], thresholds["hammix"])
ia = fusion.impostor_accepts
print(f"\nAND-rule fusion at the calibrated thresholds:")
print(f"  fused FMR  {fusion.fused_fmr:.6%}  (accept only when both accept)")
print(f"  fused FNMR {fusion.fused_fnmr:.4%}")
print(f"  impostor accepts: {ia.a_only} simileye-only, {ia.b_only} hammix-only, "
      f"{ia.both} fooled both")
if ia.a_only + ia.b_only + ia.both:
    frac = ia.both / (ia.a_only + ia.b_only + ia.both)
    print(f"  only {frac:.1%} of accept events fooled both matchers")

"""Clean speckled face labels by absorbing small connected components.

Pure label work on a capsule, no fitting: ``python demos/clean_noisy_labels.py``.
"""
import numpy as np

from anchorsplat import FaceLabeling, build_adjacency, refine, synth
from anchorsplat.labels import default_threshold, error_components, small_components


def main():
    scene = synth.generate_scene(synth.SceneSpec.capsule_two_bands(
        views={"count": 1, "resolution": 8}, speckle={"patches": 12, "patch_rings": 1}))
    adj = build_adjacency(scene.mesh)
    truth = scene.gt_labels.labels
    rng = np.random.default_rng(0)
    noisy = scene.supervision_labels.copy()
    flip = rng.uniform(size=len(noisy)) < 0.03
    noisy[flip] = rng.integers(0, 5, flip.sum())

    tau = default_threshold(adj.face_areas)
    before = FaceLabeling(noisy, tau)
    after = refine(before, adj)
    print(f"threshold {tau:.2e} m^2 ({tau / adj.face_areas.mean():.0f} average faces)")
    for name, lab in (("noisy", before), ("cleaned", after)):
        print(f"{name:8s} accuracy {np.mean(lab.labels == truth):.4f}, "
              f"wrong regions {error_components(lab.labels, truth, adj)}, small components {len(small_components(lab, adj))}")


if __name__ == "__main__":
    main()

"""The unsupervised baseline on one generated frame, step by step.

    python demos/cluster_baseline.py
"""

import numpy as np

from cathseg.baseline import kmeans, select_catheter, threshold_in_mask
from cathseg.dataset import generate_dataset
from cathseg.metrics import dsc_metric


def main():
    frame = generate_dataset(1, 0, frames=3, image_size=64, seed=5)[0].frames[1]
    points = threshold_in_mask(frame.image, frame.aorta_mask, level=0.7)
    print(f"{int(frame.aorta_mask.sum())} pixels in the aorta mask, {len(points)} survive the 70% threshold")

    history = []
    result = kmeans(points, k=2, seed=0, history=history)
    print("objective per Lloyd update:", [round(h, 1) for h in history])
    for j in range(2):
        cx, cy = result.centroids[j]
        print(f"cluster {j}: {result.sizes[j]} points, centroid ({cx:.1f}, {cy:.1f}), "
              f"VAR_rms {result.var_rms[j]:.2f}")

    idx, mask = select_catheter(result, frame.image.shape)
    ty, tx = np.nonzero(frame.catheter_mask)
    print(f"selected cluster {idx}; true catheter centroid ({tx.mean():.1f}, {ty.mean():.1f}); "
          f"DSC against the catheter mask {dsc_metric(mask, frame.catheter_mask):.3f}")


if __name__ == "__main__":
    main()

"""tablex: table detection and structure recognition for document images.

Two trainable models plus deterministic post-processing:

* a corner-proposal table detector (corner heatmaps -> proposal
  enumeration -> RoI-align refinement head), and
* a split-and-merge structure recognizer (spatial-CNN separator masks ->
  connected-component line fitting -> grid assembly -> grid-CNN cell
  merging).

Also ships a synthetic page generator with full annotations, training
loops, and the standard evaluation metrics (IoU-thresholded detection
F1 with weighted average, adjacency relations, TEDS-Struct).
"""

__version__ = "0.1.0"

"""Partial multi-task learning for aerial imagery: one shared encoder, two task
heads (object detection, semantic segmentation), each training image annotated
for exactly one task. Frozen single-task teachers can supply soft labels and
feature-imitation losses for the task a batch lacks annotations for.
"""

__version__ = "0.1.0"

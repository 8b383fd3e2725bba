# Segmentation-aware facial performance capture.

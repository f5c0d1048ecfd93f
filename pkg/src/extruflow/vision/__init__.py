"""Photo measurement: board detection, rectification, segmentation, widths."""

from .checkerboard import DetectionError, detect_checkerboard, load_corner_file
from .homography import Homography, HomographyError, estimate_homography, rectify
from .image import GrayImage, load_image, save_image
from .measure import NoBeadError, measure_widths
from .pipeline import ROI, VisionConfig, measure_image
from .segment import ClusterSummary, cluster_gmm, cluster_kmeans, threshold_kmeans

__all__ = [
    "ClusterSummary", "DetectionError", "GrayImage", "Homography", "HomographyError", "NoBeadError", "ROI",
    "VisionConfig", "cluster_gmm", "cluster_kmeans", "detect_checkerboard", "estimate_homography",
    "load_corner_file", "load_image", "measure_image", "measure_widths", "rectify", "save_image",
    "threshold_kmeans",
]

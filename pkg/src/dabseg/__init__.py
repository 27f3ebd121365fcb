"""Joint motion-deblurring and multimodal 3D MRI tumor segmentation."""

__version__ = "0.1.0"

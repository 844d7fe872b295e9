"""Ready-made scenes and solver settings for the two benchmark set-ups."""

import dataclasses

from .denoise import ApssParams
from .reconstruct import ReconConfig
from .simulate import SceneSpec, Surface


def mannequin_scene():
    """64 x 64 pixels: a back wall with a head and torso in front of it.

    About 3 signal photons per pixel at a signal-to-background ratio of 13.
    """
    return SceneSpec(
        surfaces=(
            Surface(depth=1.6, reflectivity=0.8),
            Surface(kind="cap", depth=1.25, height=0.25, center=(0.5, 0.64),
                    radii=(0.25, 0.2), reflectivity=1.0),
            Surface(kind="cap", depth=1.35, height=0.2, center=(1.1, 0.64),
                    radii=(0.35, 0.4), reflectivity=0.9),
        ),
        n_rows=64, n_cols=64, n_bins=200, pixel_pitch=0.02, bin_resolution=0.01,
        irf_sigma=4.0, signal_ppp=3.0, sbr=13.0)


def mannequin_config():
    return ReconConfig(apss=ApssParams(0.2, projection="ray"), r_min=1.5, max_iters=10)


def superres_scene():
    """32 x 32 pixels seen through a net, each split into 3 x 3 fine cells.

    Behind the net a steep ramp changes depth by about 5 cm per fine cell,
    so one depth per coarse pixel cannot describe it.  About 900 photons per
    pixel, half of them signal.
    """
    return SceneSpec(
        surfaces=(
            Surface(depth=1.0, reflectivity=1.0, hole_period=0.06, hole_size=0.04),
            Surface(depth=1.5, slope_x=1.6, reflectivity=1.0),
        ),
        n_rows=32, n_cols=32, n_bins=200, superres=3, pixel_pitch=0.03,
        bin_resolution=0.0375, irf_sigma=1.0, signal_ppp=450.0, sbr=1.0)


def superres_config():
    return ReconConfig(apss=ApssParams(0.2, projection="ray"), r_min=0.5, max_iters=10)


PRESETS = {
    "mannequin": (mannequin_scene, mannequin_config),
    "superres": (superres_scene, superres_config),
}


def coarse_sensor(sensor):
    """The same detector without super-resolution (one point cell per pixel)."""
    return dataclasses.replace(sensor, superres=1,
                               pixel_pitch=sensor.pixel_pitch * sensor.superres)

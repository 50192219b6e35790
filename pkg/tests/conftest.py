import numpy as np
import pytest

from midar.geometry import OrientedBox, Pose2, VehicleClass
from midar.rmlos import EgoState, SceneFrame


def make_box(vid="v", x=0.0, y=0.0, z=0.75, w=2.0, l=4.5, h=1.5, yaw=0.0,
             cls=VehicleClass.CAR):
    return OrientedBox(id=vid, cls=cls, cx=x, cy=y, cz=z,
                       width=w, length=l, height=h, yaw=yaw)


def make_frame(vehicles, scene="s", frame="f", ego_xy=(0.0, 0.0),
               ego_heading=0.0, z_offset=1.7):
    ego = EgoState(id="ego", pose=Pose2(ego_xy[0], ego_xy[1], ego_heading),
                   z_offset=z_offset)
    return SceneFrame(scene_id=scene, frame_id=frame, timestamp=0.0,
                      ego=ego, vehicles=tuple(vehicles))


def random_box(rng, vid, span=40.0):
    return make_box(
        vid=vid,
        x=rng.uniform(-span, span), y=rng.uniform(-span, span),
        z=rng.uniform(0.3, 1.5),
        w=rng.uniform(1.4, 2.8), l=rng.uniform(3.0, 12.0),
        h=rng.uniform(1.2, 4.0), yaw=rng.uniform(-np.pi, np.pi))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)

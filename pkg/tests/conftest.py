import pytest

from grmsim.device import GrmDevice
from grmsim.manipulator import ArmServer, GripperModel
from grmsim.objects import builtin_objects
from grmsim.protocol import ActionClient, DeviceServer, InprocTransport
from grmsim.types import Pose2D


@pytest.fixture(scope="session")
def objects():
    return builtin_objects()


@pytest.fixture
def make_device(objects):
    def factory(platform_object="rect", storage=("tri", "cyl", "cone"),
                initial_pose=Pose2D(0.0, 0.0, 0.0), config=None, **kw):
        return GrmDevice(
            config=config,
            objects=objects,
            platform_object=platform_object,
            storage=list(storage),
            initial_pose=initial_pose,
            **kw,
        )
    return factory


@pytest.fixture
def make_clients(objects, make_device):
    """(device_client, arm_client, device) wired through in-process transports."""
    def factory(**device_kw):
        device = make_device(**device_kw)
        dc = ActionClient(InprocTransport(DeviceServer(device)))
        ac = ActionClient(InprocTransport(ArmServer(builtin_objects(), GripperModel())))
        return dc, ac, device
    return factory

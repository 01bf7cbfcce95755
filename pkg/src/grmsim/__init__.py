"""grmsim: software twin of an automated grasp-reset rig.

Subpackages map to the system layers: domain types and object compatibility
(types, objects), the simulated rig firmware (device), the framed control
protocol and register map (protocol), the scripted manipulator (manipulator),
trial orchestration (orchestrator), durable session logs (datalog), and
post-hoc analysis (report).
"""

__version__ = "0.1.0"

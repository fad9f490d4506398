"""Image-to-point-cloud registration by an agent that refines a camera pose
in discrete yaw and planar translation steps.

Modules, bottom up:

* ``geometry``: rigid poses, pinhole projection, depth maps, pose errors
* ``synth``: synthetic scene pairs and their sample files
* ``autodiff``: reverse-mode tensors, layers, Adam, checkpoints
* ``embed``: point and image encoders, circle loss, frustum classifier
* ``state``: 2D and 3D state construction and encoding
* ``agent``: action space, policy and value heads, expert labels
* ``train``: rollouts, rewards, GAE, PPO with cloning
* ``evalcli``: registration recall, evaluation reports, overlays, CLI
"""

__version__ = "0.1.0"

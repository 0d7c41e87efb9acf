"""Causal visual imitation learning lab.

Subpackages:
    theory    -- linear-regression analysis of causal confusion and marker value
    world     -- deterministic 2-D tabletop simulator with scripted experts
    pipeline  -- demonstration recording, prompt resolution, masking, storage
    model     -- encoders, transformer policy, marker and causal heads
    learn     -- two-phase training, baselines, rollout and evaluation
    harness   -- command line interface and teleoperation web service
"""

__version__ = "0.1.0"

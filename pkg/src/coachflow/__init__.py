"""coachflow: adaptive coaching dialogue engine.

A batch-pretrained, per-user online-adapted Q-learning policy selects
dialogue-flow actions (summarise / follow-up / new episode); interaction
ruptures are detected from windowed multimodal feature streams; generated
coach utterances sit behind a fail-closed moderation gate; and a simulated
longitudinal study harness validates the loop end to end.
"""

__version__ = "0.1.0"

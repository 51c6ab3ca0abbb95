"""Length-controllable summarization with standard control prompts, PPO and sample filtering."""

__version__ = "0.1.0"

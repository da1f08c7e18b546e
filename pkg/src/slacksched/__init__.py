"""Slack-token transformer Q-learning for preemptive real-time scheduling."""

__version__ = "0.1.0"

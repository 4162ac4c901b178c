"""studykit: a self-hosted orchestration service for chat and search user
studies — configurable flows, in-situ popup triggers, fine-grained
interaction logging, and structured CSV export."""

__version__ = "0.1.0"

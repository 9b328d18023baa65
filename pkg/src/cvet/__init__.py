"""Label CVE descriptions with MITRE ATT&CK tactics."""

__version__ = "0.1.0"

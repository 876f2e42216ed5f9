# Domain records and configuration dataclasses

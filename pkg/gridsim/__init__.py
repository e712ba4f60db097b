"""Grid simulation: cases, AC power flow, state estimation and stealthy FDIA."""

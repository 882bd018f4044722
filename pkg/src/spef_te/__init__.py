"""Traffic engineering with optimal OSPF link weights and exponential ECMP splits."""

pub mod partitions;

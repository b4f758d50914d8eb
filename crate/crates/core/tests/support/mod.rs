pub mod fedavg;

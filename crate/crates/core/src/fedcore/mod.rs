//! The federation engine: client sampling, local training, aggregation and
//! the FedAvg / FedProx / Fedr / FedKd strategies.

mod checkpoint;
mod client;
pub mod rng;
mod server;
mod strategy;

pub use checkpoint::{decode_params, encode_params, Checkpoint};
pub use client::{
    client_update, kd_local_step, personal_update, ClientState, LocalTraining, LocalUpdate,
    PersonalModel,
};
pub use server::{
    aggregate, sample_clients, sample_size, ClientReport, GlobalState, RoundReport, Server,
};
pub use strategy::{
    blend_delta, prox_penalty, reg_penalty, DeltaMode, StrategyConfig, MAX_DELTA_HISTORY,
};
pub use strategy::hex_digest;

pub mod cli;
pub mod live;
pub mod reviewsvc;

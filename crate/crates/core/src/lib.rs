pub mod corpus;
pub mod providers;
pub mod textmetrics;
pub mod poekey;
pub mod summarizer;
pub mod instructor;
pub mod tuning;
pub mod pipeline;

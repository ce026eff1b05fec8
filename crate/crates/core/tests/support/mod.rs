pub mod gradients;
pub mod oracle;

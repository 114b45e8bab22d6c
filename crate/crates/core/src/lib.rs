pub mod acl;
pub mod cluster;
pub mod icm;
pub mod ids;
pub mod scheduler;
pub mod traffic;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod verify;

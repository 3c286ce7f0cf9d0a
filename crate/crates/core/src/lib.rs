// SPDX-License-Identifier: Apache-2.0

//! A userspace BPF runtime with verified, helper-mediated access to a
//! shared memory segment owned by a separate service process.

pub mod integrity;
pub mod isa;
pub mod pss;
pub mod ring;
pub mod shmem;
pub mod verifier;
pub mod vm;
pub mod programs;
pub mod transport;
pub mod bench;

//! Process-level tuning for large, short-lived tensor buffers.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Raises glibc's mmap and trim thresholds so large buffers are recycled
/// inside the heap. No-op elsewhere; idempotent.
pub fn tune_allocator() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}

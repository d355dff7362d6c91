//! Synchronization wrappers that apply the delay rules: owed delays are paid
//! before an operation that may wake or block, and a thread resuming from a
//! blocking operation is credited with the delays its waker already paid.

use std::ops::{Deref, DerefMut};

use super::{before_wake, blocking_sync, install_ctx, retire_current, with_ctx};
use crate::runtime::on_thread_create;

/// Mutual exclusion lock. Unlocking happens when the guard drops, after
/// the holder has paid its delays.
#[derive(Debug, Default)]
pub struct Mutex<T: ?Sized> {
    inner: parking_lot::Mutex<T>,
}

impl<T> Mutex<T> {
    pub const fn new(value: T) -> Self {
        Mutex {
            inner: parking_lot::const_mutex(value),
        }
    }

    pub fn into_inner(self) -> T {
        self.inner.into_inner()
    }
}

impl<T: ?Sized> Mutex<T> {
    pub fn lock(&self) -> MutexGuard<'_, T> {
        let guard = match self.inner.try_lock() {
            Some(g) => {
                // Uncontended: still a potential block point, so settle around it.
                before_wake();
                with_ctx(super::ThreadCtx::credit);
                g
            }
            None => blocking_sync(|| self.inner.lock()),
        };
        MutexGuard { guard: Some(guard) }
    }

    pub fn get_mut(&mut self) -> &mut T {
        self.inner.get_mut()
    }
}

pub struct MutexGuard<'a, T: ?Sized> {
    /// Always `Some` until drop.
    guard: Option<parking_lot::MutexGuard<'a, T>>,
}

impl<T: ?Sized> Deref for MutexGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        self.guard.as_ref().expect("guard is live")
    }
}

impl<T: ?Sized> DerefMut for MutexGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        self.guard.as_mut().expect("guard is live")
    }
}

impl<T: ?Sized> Drop for MutexGuard<'_, T> {
    fn drop(&mut self) {
        before_wake();
        self.guard.take();
    }
}

/// Condition variable for use with [`Mutex`].
#[derive(Debug, Default)]
pub struct Condvar {
    inner: parking_lot::Condvar,
}

impl Condvar {
    pub const fn new() -> Self {
        Condvar {
            inner: parking_lot::Condvar::new(),
        }
    }

    /// Releases the lock, waits for a notification and reacquires it.
    pub fn wait<T: ?Sized>(&self, guard: &mut MutexGuard<'_, T>) {
        let g = guard.guard.as_mut().expect("guard is live");
        blocking_sync(|| self.inner.wait(g));
    }

    /// Waits until `done` returns true for the protected value.
    pub fn wait_until<T: ?Sized>(&self, guard: &mut MutexGuard<'_, T>, mut done: impl FnMut(&mut T) -> bool) {
        while !done(&mut *guard) {
            self.wait(guard);
        }
    }

    pub fn notify_one(&self) -> bool {
        before_wake();
        self.inner.notify_one()
    }

    pub fn notify_all(&self) -> usize {
        before_wake();
        self.inner.notify_all()
    }
}

/// Reusable barrier for a fixed number of threads.
#[derive(Debug)]
pub struct Barrier {
    inner: std::sync::Barrier,
}

impl Barrier {
    pub fn new(n: usize) -> Self {
        Barrier {
            inner: std::sync::Barrier::new(n),
        }
    }

    /// Returns true for exactly one thread per generation.
    pub fn wait(&self) -> bool {
        blocking_sync(|| self.inner.wait()).is_leader()
    }
}

/// Spawns a thread that joins the parent's session, inheriting its local
/// delay count. Its exit counts as a wake operation for the joiner.
pub fn spawn<F, T>(f: F) -> JoinHandle<T>
where
    F: FnOnce() -> T + Send + 'static,
    T: Send + 'static,
{
    let child = with_ctx(|c| (c.shared.clone(), on_thread_create(&c.tstate)));
    let inner = std::thread::spawn(move || {
        if let Some((shared, tstate)) = child {
            install_ctx(shared.register(tstate));
        }
        let out = f();
        before_wake();
        retire_current();
        out
    });
    JoinHandle { inner }
}

pub struct JoinHandle<T> {
    inner: std::thread::JoinHandle<T>,
}

impl<T> JoinHandle<T> {
    pub fn join(self) -> std::thread::Result<T> {
        blocking_sync(|| self.inner.join())
    }

    pub fn thread(&self) -> &std::thread::Thread {
        self.inner.thread()
    }
}

//! Reusable scratch buffers. Large fresh allocations are returned to the OS
//! on drop, so training keeps its activations here between steps.

use super::net::Tape;
use super::scalar::Scalar;

#[derive(Debug, Default)]
pub(crate) struct Pool<S> {
    free: Vec<Vec<S>>,
}

impl<S: Scalar> Pool<S> {
    /// A zero-filled buffer of `len` elements, reusing the smallest free
    /// buffer that is large enough.
    pub fn zeroed(&mut self, len: usize) -> Vec<S> {
        let mut v = self.take(len);
        v.clear();
        v.resize(len, S::zero());
        v
    }

    /// A buffer of `len` elements whose contents are left over from earlier
    /// use; callers overwrite every element.
    pub fn dirty(&mut self, len: usize) -> Vec<S> {
        let mut v = self.take(len);
        v.truncate(len);
        v.resize(len, S::zero());
        v
    }

    fn take(&mut self, len: usize) -> Vec<S> {
        let best = self
            .free
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        match best {
            Some(i) => self.free.swap_remove(i),
            None => Vec::with_capacity(len),
        }
    }

    pub fn put(&mut self, v: Vec<S>) {
        if v.capacity() > 0 {
            self.free.push(v);
        }
    }

    pub fn recycle(&mut self, tape: Tape<S>) {
        for a in tape.acts {
            self.put(a);
        }
        for lt in tape.layers {
            self.put(lt.xhat);
            if let Some(m) = lt.mask {
                self.put(m);
            }
        }
    }
}

//! Blocking per-rank entry points backed by a full-group rendezvous.

use std::any::Any;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{
    all_gather_jagged, all_to_all_jagged, ring_send_recv, CollectiveStats, CommError, GatherPart,
    JaggedMessage,
};
use crate::scalar::Scalar;

type Erased = Box<dyn Any + Send>;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Tag {
    op: &'static str,
    call: u64,
    step: Option<usize>,
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (call #{}", self.op, self.call)?;
        if let Some(step) = self.step {
            write!(f, ", step {step}")?;
        }
        f.write_str(")")
    }
}

struct State {
    generation: u64,
    arrived: usize,
    calls: Vec<u64>,
    inputs: Vec<Option<(Tag, Erased)>>,
    outputs: Vec<Option<Result<Erased, CommError>>>,
    aborted: Option<String>,
}

/// A simulated CP group whose ranks may run on separate threads.
///
/// Each collective is a rendezvous: ranks deposit their inputs, the last one
/// to arrive executes the group-level collective and hands every rank its
/// share of the result. Ranks that disagree on which collective (or which
/// ring step) they are in all receive [`CommError::StepMismatch`]; a rank
/// that never shows up surfaces as [`CommError::Timeout`].
pub struct RankGroup {
    cp_size: usize,
    timeout: Duration,
    state: Mutex<State>,
    cv: Condvar,
}

impl RankGroup {
    pub fn new(cp_size: usize) -> Self {
        Self::with_timeout(cp_size, Duration::from_secs(120))
    }

    pub fn with_timeout(cp_size: usize, timeout: Duration) -> Self {
        assert!(cp_size > 0, "cp_size must be at least 1");
        Self {
            cp_size,
            timeout,
            state: Mutex::new(State {
                generation: 0,
                arrived: 0,
                calls: vec![0; cp_size],
                inputs: (0..cp_size).map(|_| None).collect(),
                outputs: (0..cp_size).map(|_| None).collect(),
                aborted: None,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn cp_size(&self) -> usize {
        self.cp_size
    }

    pub fn handle(&self, rank: usize) -> Result<RankHandle<'_>, CommError> {
        if rank >= self.cp_size {
            return Err(CommError::RankOutOfRange {
                rank,
                cp_size: self.cp_size,
            });
        }
        Ok(RankHandle { group: self, rank })
    }

    /// Wakes every waiting rank with an error; the group is unusable afterwards.
    pub fn abort(&self, reason: impl Into<String>) {
        let mut st = self.lock();
        st.aborted.get_or_insert_with(|| reason.into());
        self.cv.notify_all();
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        // a panicking worker must not wedge the others
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn rendezvous<I, O, F>(
        &self,
        rank: usize,
        op: &'static str,
        step: Option<usize>,
        input: I,
        run: F,
    ) -> Result<O, CommError>
    where
        I: Send + 'static,
        O: Send + 'static,
        F: FnOnce(Vec<I>) -> Result<Vec<O>, CommError>,
    {
        let mut st = self.lock();
        if let Some(reason) = &st.aborted {
            return Err(CommError::Aborted(reason.clone()));
        }
        let tag = Tag {
            op,
            call: st.calls[rank],
            step,
        };
        st.calls[rank] += 1;
        st.inputs[rank] = Some((tag, Box::new(input)));
        st.arrived += 1;
        let generation = st.generation;

        if st.arrived == self.cp_size {
            let slots: Vec<(Tag, Erased)> =
                st.inputs.iter_mut().map(|s| s.take().unwrap()).collect();
            let results = execute(slots, run);
            for (slot, r) in st.outputs.iter_mut().zip(results) {
                *slot = Some(r.map(|o| Box::new(o) as Erased));
            }
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
        } else {
            let deadline = Instant::now() + self.timeout;
            while st.generation == generation {
                if let Some(reason) = &st.aborted {
                    return Err(CommError::Aborted(reason.clone()));
                }
                let now = Instant::now();
                if now >= deadline {
                    let err = CommError::Timeout {
                        rank,
                        op: op.to_string(),
                    };
                    st.aborted = Some(err.to_string());
                    self.cv.notify_all();
                    return Err(err);
                }
                st = self
                    .cv
                    .wait_timeout(st, deadline - now)
                    .unwrap_or_else(|e| e.into_inner())
                    .0;
            }
        }

        let out = st.outputs[rank].take().expect("rendezvous output present");
        out.map(|b| *b.downcast::<O>().expect("rendezvous output type"))
    }
}

fn execute<I: 'static, O, F>(slots: Vec<(Tag, Erased)>, run: F) -> Vec<Result<O, CommError>>
where
    F: FnOnce(Vec<I>) -> Result<Vec<O>, CommError>,
{
    let n = slots.len();
    let expected = slots[0].0.clone();
    let fail = |e: CommError| (0..n).map(|_| Err(e.clone())).collect();
    if let Some((rank, (found, _))) = slots.iter().enumerate().find(|(_, (t, _))| *t != expected) {
        return fail(CommError::StepMismatch {
            rank,
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    let mut inputs = Vec::with_capacity(n);
    for (rank, (tag, boxed)) in slots.into_iter().enumerate() {
        match boxed.downcast::<I>() {
            Ok(i) => inputs.push(*i),
            Err(_) => {
                return fail(CommError::StepMismatch {
                    rank,
                    expected: expected.to_string(),
                    found: format!("{tag} with a different element type"),
                })
            }
        }
    }
    match run(inputs) {
        Ok(outs) => outs.into_iter().map(Ok).collect(),
        Err(e) => fail(e),
    }
}

/// One rank's view of a [`RankGroup`].
#[derive(Clone, Copy)]
pub struct RankHandle<'g> {
    group: &'g RankGroup,
    rank: usize,
}

impl RankHandle<'_> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn cp_size(&self) -> usize {
        self.group.cp_size
    }

    pub fn all_gather_jagged<T: Scalar>(
        &self,
        local: GatherPart<T>,
    ) -> Result<(GatherPart<T>, CollectiveStats), CommError> {
        let cp = self.group.cp_size;
        self.group
            .rendezvous(self.rank, "all_gather", None, local, move |parts| {
                let (out, stats) = all_gather_jagged(cp, parts)?;
                Ok(out.into_iter().map(|o| (o, stats.clone())).collect())
            })
    }

    /// `sends[dst]` is this rank's message for `dst`; the result is indexed by source.
    pub fn all_to_all_jagged<T: Scalar>(
        &self,
        sends: Vec<JaggedMessage<T>>,
    ) -> Result<(Vec<JaggedMessage<T>>, CollectiveStats), CommError> {
        let cp = self.group.cp_size;
        self.group
            .rendezvous(self.rank, "all_to_all", None, sends, move |all| {
                let (recv, stats) = all_to_all_jagged(cp, all)?;
                Ok(recv.into_iter().map(|r| (r, stats.clone())).collect())
            })
    }

    pub fn ring_send_recv<T: Scalar>(
        &self,
        step: usize,
        payload: JaggedMessage<T>,
    ) -> Result<(JaggedMessage<T>, CollectiveStats), CommError> {
        let cp = self.group.cp_size;
        self.group.rendezvous(
            self.rank,
            "ring_send_recv",
            Some(step),
            payload,
            move |all| {
                let steps = vec![step; cp];
                let (recv, stats) = ring_send_recv(cp, &steps, all)?;
                Ok(recv.into_iter().map(|r| (r, stats.clone())).collect())
            },
        )
    }

    pub fn barrier(&self) -> Result<(), CommError> {
        self.group.rendezvous(self.rank, "barrier", None, (), Ok)
    }
}

//! Dense row-major containers for per-agent sequences and K-candidate sets.

use crate::error::{Error, Result};
use crate::kinematics::Vec2;

/// One 2-D sequence per agent, shaped `(agents, steps, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackArray {
    pub agents: usize,
    pub steps: usize,
    pub data: Vec<f64>,
}

impl TrackArray {
    pub fn zeros(agents: usize, steps: usize) -> Self {
        TrackArray {
            agents,
            steps,
            data: vec![0.0; agents * steps * 2],
        }
    }

    pub fn from_data(agents: usize, steps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != agents * steps * 2 {
            return Err(Error::invalid(format!(
                "track array of {agents}x{steps}x2 needs {} values, got {}",
                agents * steps * 2,
                data.len()
            )));
        }
        Ok(TrackArray { agents, steps, data })
    }

    pub fn from_points<S: AsRef<[Vec2]>>(rows: &[S]) -> Result<Self> {
        let steps = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * steps * 2);
        for r in rows {
            let r = r.as_ref();
            if r.len() != steps {
                return Err(Error::invalid(format!(
                    "ragged track rows: {} vs {steps}",
                    r.len()
                )));
            }
            for p in r {
                data.push(p.x);
                data.push(p.y);
            }
        }
        Ok(TrackArray {
            agents: rows.len(),
            steps,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.steps * 2;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.steps * 2;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn point(&self, i: usize, t: usize) -> Vec2 {
        let o = (i * self.steps + t) * 2;
        Vec2::new(self.data[o], self.data[o + 1])
    }

    pub fn points(&self, i: usize) -> Vec<Vec2> {
        to_points(self.row(i))
    }
}

/// K candidate sequences per agent, shaped `(agents, k, steps, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateArray {
    pub agents: usize,
    pub k: usize,
    pub steps: usize,
    pub data: Vec<f64>,
}

impl CandidateArray {
    pub fn zeros(agents: usize, k: usize, steps: usize) -> Self {
        CandidateArray {
            agents,
            k,
            steps,
            data: vec![0.0; agents * k * steps * 2],
        }
    }

    pub fn from_data(agents: usize, k: usize, steps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != agents * k * steps * 2 {
            return Err(Error::invalid(format!(
                "candidate array of {agents}x{k}x{steps}x2 needs {} values, got {}",
                agents * k * steps * 2,
                data.len()
            )));
        }
        Ok(CandidateArray {
            agents,
            k,
            steps,
            data,
        })
    }

    fn offset(&self, i: usize, k: usize) -> usize {
        (i * self.k + k) * self.steps * 2
    }

    pub fn candidate(&self, i: usize, k: usize) -> &[f64] {
        let o = self.offset(i, k);
        &self.data[o..o + self.steps * 2]
    }

    pub fn candidate_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let o = self.offset(i, k);
        let n = self.steps * 2;
        &mut self.data[o..o + n]
    }

    pub fn point(&self, i: usize, k: usize, t: usize) -> Vec2 {
        let o = self.offset(i, k) + t * 2;
        Vec2::new(self.data[o], self.data[o + 1])
    }

    pub fn points(&self, i: usize, k: usize) -> Vec<Vec2> {
        to_points(self.candidate(i, k))
    }

    /// Picks candidate `index[i]` for every agent.
    pub fn select(&self, index: &[usize]) -> TrackArray {
        let mut out = TrackArray::zeros(self.agents, self.steps);
        for (i, &k) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.candidate(i, k));
        }
        out
    }

    /// Keeps only the first `k` candidates.
    pub fn truncate_k(&self, k: usize) -> CandidateArray {
        let k = k.min(self.k);
        let mut out = CandidateArray::zeros(self.agents, k, self.steps);
        for i in 0..self.agents {
            for c in 0..k {
                out.candidate_mut(i, c).copy_from_slice(self.candidate(i, c));
            }
        }
        out
    }

    pub(crate) fn same_shape(&self, other: &CandidateArray) -> bool {
        self.agents == other.agents && self.k == other.k && self.steps == other.steps
    }
}

pub(crate) fn to_points(flat: &[f64]) -> Vec<Vec2> {
    flat.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect()
}

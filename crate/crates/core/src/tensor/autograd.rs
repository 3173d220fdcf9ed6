use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to the trainable leaves it
/// depends on, keyed by tensor id.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, tensor: &Tensor) -> Option<&[f32]> {
        self.map.get(&tensor.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn accumulate(map: &mut HashMap<u64, Vec<f32>>, id: u64, grad: Vec<f32>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
        None => {
            map.insert(id, grad);
        }
    }
}

impl Tensor {
    /// Propagates `∂self/∂·` back to every trainable leaf.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let mut map = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { map });
        }

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.id() >= t.id() {
                        return Err(Error::Internal(format!(
                            "graph edge from tensor {} to newer tensor {}",
                            t.id(),
                            input.id()
                        )));
                    }
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        map.insert(self.id(), vec![1.0]);
        let mut leaves = HashMap::new();
        for t in &order {
            let Some(grad) = map.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    leaves.insert(t.id(), grad);
                }
                Some(node) => {
                    let input_grads = node.op.backward(t, &grad, &node.inputs);
                    for (input, g) in node.inputs.iter().zip(input_grads) {
                        if let Some(g) = g.filter(|_| input.requires_grad()) {
                            accumulate(&mut map, input.id(), g);
                        }
                    }
                }
            }
        }
        Ok(Gradients { map: leaves })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::param(vec![2, 3], vec![0.3; 6]).unwrap();
        let g = x.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_twice() {
        let x = Tensor::param(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let g = x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::param(vec![1], vec![2.0]).unwrap();
        let y = x.scale(3.0);
        let loss = y.add(&y).unwrap().add(&x).unwrap().sum();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_scalar_rejected() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            x.scale(1.0).backward(),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::from_vec(vec![2], vec![5.0, 6.0]).unwrap();
        let g = x.mul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[5.0, 6.0]);
        assert!(g.get(&c).is_none());
        assert_eq!(g.len(), 1);
    }
}

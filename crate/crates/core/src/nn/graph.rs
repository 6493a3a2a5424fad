use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layer::{Cache, LayerKind, LayerSpec};
use crate::tensor::{Scalar, Tensor};

/// An ordered list of layers. `ResidualBegin` saves the running activation,
/// the matching `ResidualEnd` adds it back.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T = f32> {
    pub layers: Vec<LayerSpec<T>>,
}

/// Per-layer caches recorded by [`Sequential::forward_train`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<Option<Cache<T>>>,
}

impl<T> Tape<T> {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    /// Drops the cache of one layer (used to exercise the missing-cache path).
    pub fn forget(&mut self, layer: usize) {
        if let Some(c) = self.caches.get_mut(layer) {
            *c = None;
        }
    }
}

fn add_skip<T: Scalar>(x: &Tensor<T>, skip: &Tensor<T>, layer: usize) -> Result<Tensor<T>> {
    if x.shape() != skip.shape() {
        return Err(Error::shape(
            layer,
            format!("residual add {:?} + {:?}", x.shape(), skip.shape()),
        ));
    }
    Ok(x.add(skip))
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<LayerSpec<T>>) -> Self {
        Self { layers }
    }

    /// Per-example output shape after every layer.
    pub fn trace_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input.to_vec();
        let mut skips = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| e.at_layer(i))?;
            match layer.kind() {
                LayerKind::ResidualBegin => skips.push(shape.clone()),
                LayerKind::ResidualEnd => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::shape(i, "residual end without begin"))?;
                    if skip != shape {
                        return Err(Error::shape(
                            i,
                            format!("residual add {shape:?} + {skip:?}"),
                        ));
                    }
                }
                _ => {}
            }
            out.push(shape.clone());
        }
        if !skips.is_empty() {
            return Err(Error::shape(self.layers.len(), "unterminated residual block"));
        }
        Ok(out)
    }

    /// Inference over a batch, calling `observe(layer_index, output)` after
    /// every layer.
    pub fn infer_observed(
        &self,
        x: &Tensor<T>,
        mut observe: impl FnMut(usize, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        let mut skips = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer.kind() {
                LayerKind::ResidualBegin => {
                    skips.push(cur.clone());
                    cur
                }
                LayerKind::ResidualEnd => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::shape(i, "residual end without begin"))?;
                    add_skip(&cur, &skip, i)?
                }
                _ => layer.infer(&cur).map_err(|e| e.at_layer(i))?,
            };
            observe(i, &cur);
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_observed(x, |_, _| {})
    }

    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let mut cur = x.clone();
        let mut skips = Vec::new();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (y, cache) = layer.forward_train(&cur, rng).map_err(|e| e.at_layer(i))?;
            cur = match layer.kind() {
                LayerKind::ResidualBegin => {
                    skips.push(y.clone());
                    y
                }
                LayerKind::ResidualEnd => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::shape(i, "residual end without begin"))?;
                    add_skip(&y, &skip, i)?
                }
                _ => y,
            };
            caches.push(Some(cache));
        }
        Ok((cur, Tape { caches }))
    }

    /// Backpropagates `dy` through the recorded tape. Returns the input
    /// gradient and, per layer, the gradients of its trainable parameters.
    pub fn backward(&self, tape: &Tape<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<Tensor<T>>>)> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::MissingCache {
                layer: tape.caches.len(),
            });
        }
        let mut grad = dy.clone();
        let mut skip_grads = Vec::new();
        let mut param_grads = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let cache = tape.caches[i].as_ref();
            match layer.kind() {
                LayerKind::ResidualEnd => {
                    cache.ok_or(Error::MissingCache { layer: i })?;
                    skip_grads.push(grad.clone());
                }
                LayerKind::ResidualBegin => {
                    cache.ok_or(Error::MissingCache { layer: i })?;
                    let skip = skip_grads
                        .pop()
                        .ok_or_else(|| Error::shape(i, "residual begin without end"))?;
                    grad = add_skip(&grad, &skip, i)?;
                }
                _ => {
                    let (dx, dparams) = layer.backward(&grad, cache).map_err(|e| e.at_layer(i))?;
                    grad = dx;
                    param_grads[i] = dparams;
                }
            }
        }
        Ok((grad, param_grads))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(Tensor::len)
            .sum()
    }
}

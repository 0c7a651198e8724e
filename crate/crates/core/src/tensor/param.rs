use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::Tensor;

/// Which optimizer owns a parameter. The search alternates between the two
/// groups and each pass only differentiates its own group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Network weights, biases, quantizer steps, normalization scalars.
    Weight,
    /// Architecture logits.
    Arch,
}

#[derive(Debug)]
struct ParamData {
    name: String,
    group: ParamGroup,
    value: Tensor,
    grad: Tensor,
}

/// Shared handle to a trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param(Rc<RefCell<ParamData>>);

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param(Rc::new(RefCell::new(ParamData {
            name: name.into(),
            group,
            value,
            grad,
        })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn group(&self) -> ParamGroup {
        self.0.borrow().group
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |p| &p.value)
    }

    pub fn grad(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |p| &p.grad)
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().value.numel()
    }

    pub fn set_value(&self, value: Tensor) {
        let mut p = self.0.borrow_mut();
        assert_eq!(p.value.shape(), value.shape(), "param {} reshaped", p.name);
        p.value = value;
    }

    /// Applies `f(value, grad)` in place.
    pub fn update(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let mut p = self.0.borrow_mut();
        let ParamData { value, grad, .. } = &mut *p;
        f(value.data_mut(), grad.data());
    }

    pub fn zero_grad(&self) {
        let mut p = self.0.borrow_mut();
        p.grad.data_mut().fill(0.0);
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut p = self.0.borrow_mut();
        for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    /// A new, independent parameter holding a copy of this one's value.
    pub fn deep_clone(&self) -> Param {
        let p = self.0.borrow();
        Param::new(p.name.clone(), p.group, p.value.clone())
    }

    pub fn ptr_eq(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

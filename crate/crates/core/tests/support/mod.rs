pub mod grid_qp;

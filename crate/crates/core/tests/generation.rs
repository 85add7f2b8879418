use entdiff::evaluation::toy::correlated_table;
use entdiff::generation::{sample_batch, SampleConfig};
use entdiff::model::{Model, ModelConfig};
use entdiff::schema::{Cell, EntityInstance};

fn untrained() -> (Model, Vec<EntityInstance>) {
    let data = correlated_table(200, 0.3, 61);
    let schema = data.schema.fit_normalizers(&data.entities).unwrap();
    (Model::new(ModelConfig { seed: 61, ..ModelConfig::default() }, schema).unwrap(), data.entities)
}

#[test]
fn single_open_leaf_ignores_leap() {
    let (model, data) = untrained();
    let rows: Vec<EntityInstance> = data
        .iter()
        .map(|_| {
            let mut e = EntityInstance::new(vec![Cell::Missing; model.dim()]);
            e.cells[2] = Cell::Masked;
            e
        })
        .collect();
    let draw = |leap| sample_batch(&model, &rows, &SampleConfig { leap, seed: 62, ..SampleConfig::default() }, 0).unwrap();
    let reference = draw(1);
    for leap in 2..=model.dim() + 1 {
        let out = draw(leap);
        for (a, b) in reference.iter().zip(&out) {
            assert_eq!(a.entity, b.entity);
            assert_eq!(b.network_calls, 1);
        }
    }
}

#[test]
fn observed_leaves_come_back_bitwise() {
    let (model, data) = untrained();
    let rows: Vec<EntityInstance> = data
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut e = e.clone();
            for leaf in 0..model.dim() {
                if (i + leaf) % 3 == 0 {
                    e.cells[leaf] = Cell::Masked;
                }
            }
            e
        })
        .collect();
    for leap in [1, 2, model.dim()] {
        let out = sample_batch(&model, &rows, &SampleConfig { leap, seed: 63, ..SampleConfig::default() }, 0).unwrap();
        for (given, o) in rows.iter().zip(&out) {
            let masked = given.masked_count();
            assert_eq!(o.network_calls, masked.div_ceil(leap));
            for (g, c) in given.cells.iter().zip(&o.entity.cells) {
                match g {
                    Cell::Masked => assert!(c.is_present()),
                    _ => assert_eq!(format!("{g:?}"), format!("{c:?}")),
                }
            }
        }
    }
}

#![allow(dead_code)]

use mgdif::data::ResponseMatrix;
use mgdif::irt::ItemParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Responses for `items[j][g]` with `n` persons per group drawn from
/// `N(mu_g, 1)`.
pub fn simulate(items: &[Vec<ItemParams>], n: usize, mus: &[f64], seed: u64) -> ResponseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut persons, mut groups, mut responses) = (Vec::new(), Vec::new(), Vec::new());
    for (g, &mu) in mus.iter().enumerate() {
        let normal = Normal::new(mu, 1.0).unwrap();
        for _ in 0..n {
            let theta = normal.sample(&mut rng);
            persons.push(format!("p{}", persons.len()));
            groups.push(g);
            responses.extend(items.iter().map(|it| Some(rng.random::<f64>() < it[g].prob(theta))));
        }
    }
    ResponseMatrix::new(
        persons,
        (0..mus.len()).map(|g| format!("g{g}")).collect(),
        groups,
        (0..items.len()).map(|j| format!("i{j}")).collect(),
        responses,
    )
    .unwrap()
}

/// Same items in every group.
pub fn invariant(items: &[ItemParams], n_groups: usize) -> Vec<Vec<ItemParams>> {
    items.iter().map(|it| vec![*it; n_groups]).collect()
}

pub fn spread_2pl(n_items: usize) -> Vec<ItemParams> {
    (0..n_items)
        .map(|j| {
            let b = -1.8 + 3.6 * j as f64 / (n_items - 1) as f64;
            ItemParams::two_pl(0.7 + 0.15 * (j % 6) as f64, b).unwrap()
        })
        .collect()
}

/// Copies group 0 into a second group, person for person.
pub fn duplicate_group(data: &ResponseMatrix) -> ResponseMatrix {
    let n = data.n_persons();
    let mut persons = data.person_ids().to_vec();
    persons.extend(data.person_ids().iter().map(|p| format!("{p}-copy")));
    let mut groups = vec![0; n];
    groups.extend(vec![1; n]);
    let mut responses: Vec<Option<bool>> = (0..n).flat_map(|p| data.row(p).to_vec()).collect();
    responses.extend(responses.clone());
    ResponseMatrix::new(persons, vec!["a".into(), "b".into()], groups, data.item_ids().to_vec(), responses).unwrap()
}

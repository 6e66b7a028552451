use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::autodiff::Rng;
use crate::error::{Error, Result};

/// Shape of an N-way K-shot meta-task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
}

/// A query instance and its binary label vector over the episode's classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub instance: usize,
    pub labels: Vec<bool>,
}

/// One meta-task. Instances are referenced by corpus id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<String>,
    /// `support[n]` holds the K instance ids drawn for `classes[n]`.
    pub support: Vec<Vec<usize>>,
    pub queries: Vec<Query>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Gold labels as a row-major `M×N` 0/1 matrix.
    pub fn gold(&self) -> Vec<Vec<f64>> {
        self.queries
            .iter()
            .map(|q| q.labels.iter().map(|&b| f64::from(u8::from(b))).collect())
            .collect()
    }
}

/// Draws one episode.
///
/// Classes are drawn uniformly without replacement. Each class then gets
/// `k_shot` support instances and `queries_per_class` queries drawn without
/// replacement from its own instances, never reusing an instance already
/// placed in the episode. An instance that belongs to several episode classes
/// therefore appears once, with all of its bits set, and the class that would
/// have drawn it again draws a replacement.
pub fn sample_episode(corpus: &Corpus, shape: EpisodeShape, rng: &mut Rng) -> Result<Episode> {
    let EpisodeShape {
        n_way,
        k_shot,
        queries_per_class,
    } = shape;
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config("n_way and k_shot must be positive".into()));
    }
    let all: Vec<&str> = corpus.classes().collect();
    if all.len() < n_way {
        return Err(Error::Sampling(format!(
            "corpus has {} classes, episode needs {n_way}",
            all.len()
        )));
    }
    let classes: Vec<String> = index::sample(rng, all.len(), n_way)
        .into_iter()
        .map(|i| all[i].to_string())
        .collect();
    let need = k_shot + queries_per_class;
    for c in &classes {
        let have = corpus.instances_of(c).len();
        if have < need {
            return Err(Error::Sampling(format!(
                "class {c:?} has {have} instances, episode needs {need}"
            )));
        }
    }

    let mut used: HashSet<usize> = HashSet::new();
    let pools: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| {
            let mut pool = corpus.instances_of(c).to_vec();
            pool.shuffle(rng);
            pool
        })
        .collect();
    let mut cursors = vec![0usize; n_way];

    let mut take = |n: usize, count: usize, used: &mut HashSet<usize>, role: &str| {
        let mut picked = Vec::with_capacity(count);
        let pool = &pools[n];
        while picked.len() < count {
            let Some(&id) = pool.get(cursors[n]) else {
                return Err(Error::Sampling(format!(
                    "class {:?} ran out of unused instances for its {role} set",
                    classes[n]
                )));
            };
            cursors[n] += 1;
            if used.insert(id) {
                picked.push(id);
            }
        }
        Ok(picked)
    };

    let mut support = Vec::with_capacity(n_way);
    for n in 0..n_way {
        support.push(take(n, k_shot, &mut used, "support")?);
    }
    let mut query_ids = Vec::with_capacity(n_way * queries_per_class);
    for n in 0..n_way {
        query_ids.extend(take(n, queries_per_class, &mut used, "query")?);
    }

    let queries = query_ids
        .into_iter()
        .map(|id| {
            let labels = &corpus.instance(id).labels;
            Query {
                instance: id,
                labels: classes.iter().map(|c| labels.contains(c)).collect(),
            }
        })
        .collect();
    Ok(Episode {
        classes,
        support,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::Instance;

    fn inst(text: &str, labels: &[&str]) -> Instance {
        Instance {
            text: text.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The three-class support/query example from the FewAsp domain, padded
    /// with extra sentences so every class can fill K=2 plus a query.
    fn restaurant_corpus() -> Corpus {
        Corpus::new(vec![
            inst(
                "first time, burger was not fully cooked and my smash fries were cold.",
                &["food_food_meat_burger"],
            ),
            inst("food was over priced, but okay not great.", &["food_food_meat_burger"]),
            inst("my brother and i stopped in for lunch.", &["food_mealtype_lunch"]),
            inst(
                "lunch has a great option of picking one or two food with rice.",
                &["food_mealtype_lunch"],
            ),
            inst("i prefer the other location to be honest.", &["restaurant_location"]),
            inst("there's a new standard in town.", &["restaurant_location"]),
            inst("went back today for lunch.", &["food_mealtype_lunch"]),
            inst(
                "food is whats to be expected at a neighborhood grill.",
                &["food_food_meat_burger", "restaurant_location"],
            ),
            inst(
                "the burger place moved across the street.",
                &["food_food_meat_burger", "restaurant_location"],
            ),
            inst("the burger was juicy.", &["food_food_meat_burger"]),
            inst("the location is right by my office.", &["restaurant_location"]),
        ])
        .unwrap()
    }

    fn uniform_corpus(classes: usize, per_class: usize) -> Corpus {
        let mut v = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                v.push(inst(&format!("s{c} {i}"), &[&format!("c{c}")]));
            }
        }
        Corpus::new(v).unwrap()
    }

    fn check_invariants(corpus: &Corpus, ep: &Episode, shape: EpisodeShape) {
        assert_eq!(ep.classes.len(), shape.n_way);
        assert_eq!(ep.support.len(), shape.n_way);
        assert_eq!(ep.queries.len(), shape.n_way * shape.queries_per_class);
        let mut seen = HashSet::new();
        for (n, ids) in ep.support.iter().enumerate() {
            assert_eq!(ids.len(), shape.k_shot);
            for id in ids {
                assert!(corpus.instance(*id).labels.contains(&ep.classes[n]));
                assert!(seen.insert(*id), "instance {id} reused");
            }
        }
        for q in &ep.queries {
            assert!(seen.insert(q.instance), "query {} reused", q.instance);
            assert!(q.labels.iter().any(|&b| b));
            for (n, &bit) in q.labels.iter().enumerate() {
                assert_eq!(bit, corpus.instance(q.instance).labels.contains(&ep.classes[n]));
            }
        }
    }

    #[test]
    fn three_way_two_shot_restaurant_episode() {
        let corpus = restaurant_corpus();
        let shape = EpisodeShape {
            n_way: 3,
            k_shot: 2,
            queries_per_class: 1,
        };
        let mut saw_multi = false;
        for seed in 0..50 {
            let ep = sample_episode(&corpus, shape, &mut Rng::new(seed)).unwrap();
            check_invariants(&corpus, &ep, shape);
            saw_multi |= ep
                .queries
                .iter()
                .any(|q| q.labels.iter().filter(|&&b| b).count() == 2);
        }
        assert!(saw_multi);
    }

    #[test]
    fn five_way_ten_shot_sizes() {
        let corpus = uniform_corpus(8, 20);
        let shape = EpisodeShape {
            n_way: 5,
            k_shot: 10,
            queries_per_class: 5,
        };
        let ep = sample_episode(&corpus, shape, &mut Rng::new(5)).unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 50);
        assert_eq!(ep.queries.len(), 25);
        check_invariants(&corpus, &ep, shape);
    }

    #[test]
    fn deterministic_and_non_mutating() {
        let corpus = uniform_corpus(6, 10);
        let before = corpus.clone();
        let shape = EpisodeShape {
            n_way: 5,
            k_shot: 3,
            queries_per_class: 2,
        };
        let a = sample_episode(&corpus, shape, &mut Rng::new(11)).unwrap();
        let b = sample_episode(&corpus, shape, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(corpus, before);
    }

    #[test]
    fn insufficient_data_names_the_class() {
        let mut v: Vec<Instance> = (0..10).map(|i| inst(&format!("a{i}"), &["big"])).collect();
        v.push(inst("only one", &["tiny"]));
        let corpus = Corpus::new(v).unwrap();
        let shape = EpisodeShape {
            n_way: 2,
            k_shot: 2,
            queries_per_class: 1,
        };
        match sample_episode(&corpus, shape, &mut Rng::new(0)) {
            Err(Error::Sampling(msg)) => assert!(msg.contains("tiny"), "{msg}"),
            other => panic!("expected sampling error, got {other:?}"),
        }
        let too_many = EpisodeShape {
            n_way: 3,
            ..shape
        };
        assert!(matches!(
            sample_episode(&corpus, too_many, &mut Rng::new(0)),
            Err(Error::Sampling(_))
        ));
        assert!(sample_episode(&Corpus::default(), shape, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn class_draw_is_uniform() {
        let corpus = uniform_corpus(10, 2);
        let shape = EpisodeShape {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 1,
        };
        let mut rng = Rng::new(2024);
        let mut counts = std::collections::HashMap::<String, usize>::new();
        let draws = 10_000;
        for _ in 0..draws {
            let ep = sample_episode(&corpus, shape, &mut rng).unwrap();
            for c in ep.classes {
                *counts.entry(c).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), 10);
        for (c, n) in counts {
            let f = n as f64 / draws as f64;
            assert!((f - 0.5).abs() <= 0.02, "{c}: {f}");
        }
    }
}
